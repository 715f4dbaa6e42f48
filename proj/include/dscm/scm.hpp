#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/types.h>

namespace dscm {

/// Observed (or counterfactual) values of the non-image nodes. Categorical
/// values are stored as integral doubles.
struct ParentVector {
  std::map<std::string, double> values;

  double at(const std::string& node) const;
  bool contains(const std::string& node) const { return values.count(node) != 0; }
  double& operator[](const std::string& node) { return values[node]; }
  bool operator==(const ParentVector&) const = default;
};

/// do(node := value) for each assignment. Empty means the null intervention.
struct Intervention {
  std::map<std::string, double> assignments;

  bool is_null() const { return assignments.empty(); }
  static Intervention parse(std::span<const std::string> pairs);  // "node=value"
};

enum class NodeKind { Continuous, Categorical };

/// Declared support of a node; interventions outside it are rejected.
struct NodeDomain {
  NodeKind kind = NodeKind::Continuous;
  double lo = 0.0;
  double hi = 0.0;
  int categories = 0;  // categorical only, values 0..categories-1
  std::string unit;

  bool contains(double v) const;
};

class CausalGraph {
 public:
  void add_node(const std::string& name);
  void add_edge(const std::string& parent, const std::string& child);

  const std::vector<std::string>& nodes() const { return nodes_; }
  const std::vector<std::pair<std::string, std::string>>& edges() const { return edges_; }
  bool has_node(const std::string& name) const;
  std::vector<std::string> parents(const std::string& node) const;
  std::vector<std::string> children(const std::string& node) const;
  bool is_ancestor(const std::string& ancestor, const std::string& node) const;

  /// Kahn's algorithm with ties broken by insertion order; throws ConfigError on a cycle.
  std::vector<std::string> topological_order() const;

 private:
  std::vector<std::string> nodes_;
  std::vector<std::pair<std::string, std::string>> edges_;
};

/// x_k := forward(pa_k, eps_k) with a closed-form inverse eps_k = inverse(x_k, pa_k).
struct ParentMechanism {
  using Forward = std::function<double(std::span<const double> parents, double eps)>;
  using Inverse = std::function<double(double value, std::span<const double> parents)>;

  std::string child;
  std::vector<std::string> parents;
  std::string id;  // registry identifier, e.g. "morpho.slant"
  NodeDomain domain;
  Forward forward;
  Inverse inverse;  // throws DomainError when value is not in the mechanism's codomain
};

/// Builds mechanisms by identifier. Known ids: identity, morpho.slant,
/// morpho.thickness, morpho.intensity, morpho.hue.
ParentMechanism make_parent_mechanism(const std::string& id, const std::string& child,
                                      std::vector<std::string> parents);

enum class AbductionMode { Spatial, Semantic, Dynamic };

AbductionMode parse_abduction_mode(const std::string& s);
std::string to_string(AbductionMode mode);

/// The learned image mechanism. Implemented by the mechanisms module.
class ImageMechanism {
 public:
  virtual ~ImageMechanism() = default;
  virtual bool trained() const = 0;
  virtual bool supports(AbductionMode mode) const = 0;
  /// x is a [B,C,H,W] batch on [-1,1]; returns counterfactuals on [-1,1].
  virtual torch::Tensor counterfactual(const torch::Tensor& x, std::span<const ParentVector> pa,
                                       std::span<const ParentVector> cf_pa,
                                       AbductionMode mode) const = 0;
};

class Scm {
 public:
  Scm(std::vector<ParentMechanism> mechanisms, std::string image_node,
      std::vector<std::string> image_parents);

  /// Declarative form: {"image": "x", "image_parents": [...], "nodes": [{"name", "mechanism", "parents"}]}.
  static Scm from_json(const nlohmann::json& j);
  /// Built-in graphs: "morpho" (d,t,i,s), "morpho-digit" (d only), "cmorpho" (d,t,s,h).
  static Scm preset(const std::string& name);
  nlohmann::json to_json() const;

  const CausalGraph& graph() const { return graph_; }
  const std::string& image_node() const { return image_node_; }
  const std::vector<std::string>& image_parents() const { return image_parents_; }
  const std::vector<std::string>& order() const { return order_; }  // non-image nodes
  const ParentMechanism& mechanism(const std::string& node) const;

  void set_image_mechanism(std::shared_ptr<const ImageMechanism> mech) { image_mechanism_ = std::move(mech); }
  const ImageMechanism* image_mechanism() const { return image_mechanism_.get(); }

  void validate(const ParentVector& pa) const;
  void validate(const Intervention& iv) const;

 private:
  CausalGraph graph_;
  std::map<std::string, ParentMechanism> mechanisms_;
  std::string image_node_;
  std::vector<std::string> image_parents_;
  std::vector<std::string> order_;
  std::shared_ptr<const ImageMechanism> image_mechanism_;
};

/// The values of pa for the non-image nodes of scm; other entries are dropped.
ParentVector restrict_to(const Scm& scm, const ParentVector& pa);

/// Exogenous noise per node, computed in topological order.
std::map<std::string, double> abduct_parents(const Scm& scm, const ParentVector& pa);

/// Abduction-action-prediction over the parent mechanisms. Nodes whose own
/// value and ancestry are untouched by the intervention keep their observed value.
ParentVector counterfactual_parents(const Scm& scm, const ParentVector& pa, const Intervention& iv);

/// Image counterfactuals for a batch; one intervention applied to every sample.
torch::Tensor counterfactual_image(const Scm& scm, const torch::Tensor& x,
                                   std::span<const ParentVector> pa, const Intervention& iv,
                                   AbductionMode mode);

double logistic(double v);

}  // namespace dscm
