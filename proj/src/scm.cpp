#include "dscm/scm.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <set>
#include <sstream>

#include "dscm/error.hpp"

namespace dscm {

double logistic(double v) { return 1.0 / (1.0 + std::exp(-v)); }

double ParentVector::at(const std::string& node) const {
  auto it = values.find(node);
  if (it == values.end()) throw ArgumentError("parent vector has no value for node '" + node + "'");
  return it->second;
}

Intervention Intervention::parse(std::span<const std::string> pairs) {
  Intervention iv;
  for (const auto& p : pairs) {
    auto eq = p.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == p.size())
      throw ArgumentError("intervention '" + p + "' is not of the form node=value");
    std::string node = p.substr(0, eq);
    std::string rhs = p.substr(eq + 1);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(rhs, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != rhs.size() || !std::isfinite(v))
      throw ArgumentError("intervention value '" + rhs + "' for node '" + node + "' is not a number");
    iv.assignments[node] = v;
  }
  return iv;
}

bool NodeDomain::contains(double v) const {
  if (!std::isfinite(v)) return false;
  if (kind == NodeKind::Categorical)
    return v == std::floor(v) && v >= 0.0 && v < static_cast<double>(categories);
  return v >= lo && v <= hi;
}

// ---------------------------------------------------------------- graph

void CausalGraph::add_node(const std::string& name) {
  if (name.empty()) throw ConfigError("node names must be non-empty");
  if (has_node(name)) throw ConfigError("duplicate node '" + name + "'");
  nodes_.push_back(name);
}

void CausalGraph::add_edge(const std::string& parent, const std::string& child) {
  if (!has_node(parent)) throw ConfigError("edge references unknown node '" + parent + "'");
  if (!has_node(child)) throw ConfigError("edge references unknown node '" + child + "'");
  if (parent == child) throw ConfigError("self-loop on node '" + parent + "'");
  edges_.emplace_back(parent, child);
}

bool CausalGraph::has_node(const std::string& name) const {
  return std::find(nodes_.begin(), nodes_.end(), name) != nodes_.end();
}

std::vector<std::string> CausalGraph::parents(const std::string& node) const {
  std::vector<std::string> out;
  for (const auto& [p, c] : edges_)
    if (c == node) out.push_back(p);
  return out;
}

std::vector<std::string> CausalGraph::children(const std::string& node) const {
  std::vector<std::string> out;
  for (const auto& [p, c] : edges_)
    if (p == node) out.push_back(c);
  return out;
}

bool CausalGraph::is_ancestor(const std::string& ancestor, const std::string& node) const {
  std::deque<std::string> frontier{ancestor};
  std::set<std::string> seen;
  while (!frontier.empty()) {
    auto cur = frontier.front();
    frontier.pop_front();
    for (const auto& c : children(cur)) {
      if (c == node) return true;
      if (seen.insert(c).second) frontier.push_back(c);
    }
  }
  return false;
}

std::vector<std::string> CausalGraph::topological_order() const {
  std::map<std::string, int> indeg;
  for (const auto& n : nodes_) indeg[n] = 0;
  for (const auto& e : edges_) ++indeg[e.second];
  std::vector<std::string> order;
  std::vector<bool> done(nodes_.size(), false);
  while (order.size() < nodes_.size()) {
    bool progressed = false;
    for (std::size_t k = 0; k < nodes_.size(); ++k) {
      if (done[k] || indeg[nodes_[k]] != 0) continue;
      done[k] = true;
      order.push_back(nodes_[k]);
      for (const auto& c : children(nodes_[k])) --indeg[c];
      progressed = true;
      break;
    }
    if (!progressed) throw ConfigError("causal graph contains a cycle");
  }
  return order;
}

// ---------------------------------------------------------------- registry

namespace {

void expect_arity(const std::string& id, const std::vector<std::string>& parents, std::size_t n) {
  if (parents.size() != n) {
    std::ostringstream os;
    os << "mechanism '" << id << "' expects " << n << " parent(s), got " << parents.size();
    throw ConfigError(os.str());
  }
}

}  // namespace

ParentMechanism make_parent_mechanism(const std::string& id, const std::string& child,
                                      std::vector<std::string> parents) {
  ParentMechanism m;
  m.child = child;
  m.id = id;
  m.parents = std::move(parents);

  if (id == "identity") {
    // Categorical root d := eps_d.
    expect_arity(id, m.parents, 0);
    m.domain = {NodeKind::Categorical, 0.0, 9.0, 10, "class"};
    m.forward = [](std::span<const double>, double eps) { return eps; };
    m.inverse = [child](double v, std::span<const double>) {
      if (!(v == std::floor(v) && v >= 0.0 && v <= 9.0))
        throw DomainError(child, "categorical value must be an integer in [0, 9]");
      return v;
    };
  } else if (id == "morpho.slant") {
    // s := -27 + 6 d + 3 eps_s (degrees)
    expect_arity(id, m.parents, 1);
    m.domain = {NodeKind::Continuous, -90.0, 90.0, 0, "degrees"};
    m.forward = [](std::span<const double> pa, double eps) { return -27.0 + 6.0 * pa[0] + 3.0 * eps; };
    m.inverse = [child](double v, std::span<const double> pa) {
      if (!std::isfinite(v)) throw DomainError(child, "slant must be finite");
      return (v - (-27.0 + 6.0 * pa[0])) / 3.0;
    };
  } else if (id == "morpho.thickness") {
    // t := 0.5 + eps_t, eps_t ~ Gamma(10, 5) has support (0, inf)
    expect_arity(id, m.parents, 0);
    m.domain = {NodeKind::Continuous, 0.5, 8.0, 0, "pixels"};
    m.forward = [](std::span<const double>, double eps) { return 0.5 + eps; };
    m.inverse = [child](double v, std::span<const double>) {
      if (!(v > 0.5) || !std::isfinite(v))
        throw DomainError(child, "thickness must exceed 0.5 (Gamma noise is positive)");
      return v - 0.5;
    };
  } else if (id == "morpho.intensity") {
    // i := 191 * sigmoid(0.5 eps_i + 2 t - 5)
    expect_arity(id, m.parents, 1);
    m.domain = {NodeKind::Continuous, 1.0, 190.0, 0, "grey level"};
    m.forward = [](std::span<const double> pa, double eps) {
      return 191.0 * logistic(0.5 * eps + 2.0 * pa[0] - 5.0);
    };
    m.inverse = [child](double v, std::span<const double> pa) {
      if (!(v > 0.0 && v < 191.0)) throw DomainError(child, "intensity must lie in the open interval (0, 191)");
      double p = v / 191.0;
      return (std::log(p / (1.0 - p)) - 2.0 * pa[0] + 5.0) / 0.5;
    };
  } else if (id == "morpho.hue") {
    // h := 0.1 d + 0.05 + 0.05 eps_h
    expect_arity(id, m.parents, 1);
    m.domain = {NodeKind::Continuous, 0.0, 1.0, 0, "hue"};
    m.forward = [](std::span<const double> pa, double eps) { return 0.1 * pa[0] + 0.05 + 0.05 * eps; };
    m.inverse = [child](double v, std::span<const double> pa) {
      if (!std::isfinite(v)) throw DomainError(child, "hue must be finite");
      return (v - 0.1 * pa[0] - 0.05) / 0.05;
    };
  } else {
    throw ConfigError("unknown mechanism id '" + id + "'");
  }
  return m;
}

AbductionMode parse_abduction_mode(const std::string& s) {
  if (s == "spatial") return AbductionMode::Spatial;
  if (s == "semantic") return AbductionMode::Semantic;
  if (s == "dynamic") return AbductionMode::Dynamic;
  throw ArgumentError("unknown abduction mode '" + s + "' (expected spatial|semantic|dynamic)");
}

std::string to_string(AbductionMode mode) {
  switch (mode) {
    case AbductionMode::Spatial: return "spatial";
    case AbductionMode::Semantic: return "semantic";
    case AbductionMode::Dynamic: return "dynamic";
  }
  return "?";
}

// ---------------------------------------------------------------- scm

Scm::Scm(std::vector<ParentMechanism> mechanisms, std::string image_node,
         std::vector<std::string> image_parents)
    : image_node_(std::move(image_node)), image_parents_(std::move(image_parents)) {
  for (auto& m : mechanisms) {
    if (m.child == image_node_) throw ConfigError("the image node cannot have a parent mechanism");
    graph_.add_node(m.child);
  }
  graph_.add_node(image_node_);
  for (auto& m : mechanisms) {
    for (const auto& p : m.parents) {
      if (p == image_node_) throw ConfigError("the image node cannot have children");
      graph_.add_edge(p, m.child);
    }
    auto child = m.child;
    if (!mechanisms_.emplace(child, std::move(m)).second)
      throw ConfigError("more than one mechanism for node '" + child + "'");
  }
  if (image_parents_.empty()) throw ConfigError("the image node needs at least one parent");
  for (const auto& p : image_parents_) graph_.add_edge(p, image_node_);
  for (auto& n : graph_.topological_order())
    if (n != image_node_) order_.push_back(n);
}

Scm Scm::from_json(const nlohmann::json& j) {
  std::vector<ParentMechanism> mechs;
  for (const auto& n : j.at("nodes")) {
    std::vector<std::string> parents = n.value("parents", std::vector<std::string>{});
    mechs.push_back(make_parent_mechanism(n.at("mechanism").get<std::string>(),
                                          n.at("name").get<std::string>(), std::move(parents)));
  }
  return Scm(std::move(mechs), j.value("image", std::string("x")),
             j.at("image_parents").get<std::vector<std::string>>());
}

nlohmann::json Scm::to_json() const {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : order_) {
    const auto& m = mechanisms_.at(n);
    nodes.push_back({{"name", n}, {"mechanism", m.id}, {"parents", m.parents}});
  }
  return {{"image", image_node_}, {"image_parents", image_parents_}, {"nodes", nodes}};
}

Scm Scm::preset(const std::string& name) {
  if (name == "morpho") {
    return Scm({make_parent_mechanism("identity", "d", {}),
                make_parent_mechanism("morpho.thickness", "t", {}),
                make_parent_mechanism("morpho.intensity", "i", {"t"}),
                make_parent_mechanism("morpho.slant", "s", {"d"})},
               "x", {"d", "t", "i", "s"});
  }
  if (name == "morpho-digit") {
    return Scm({make_parent_mechanism("identity", "d", {})}, "x", {"d"});
  }
  if (name == "cmorpho") {
    return Scm({make_parent_mechanism("identity", "d", {}),
                make_parent_mechanism("morpho.thickness", "t", {}),
                make_parent_mechanism("morpho.slant", "s", {"d"}),
                make_parent_mechanism("morpho.hue", "h", {"d"})},
               "x", {"d", "t", "s", "h"});
  }
  throw ConfigError("unknown SCM preset '" + name + "' (expected morpho|morpho-digit|cmorpho)");
}

const ParentMechanism& Scm::mechanism(const std::string& node) const {
  auto it = mechanisms_.find(node);
  if (it == mechanisms_.end()) throw ArgumentError("no mechanism for node '" + node + "'");
  return it->second;
}

void Scm::validate(const ParentVector& pa) const {
  for (const auto& n : order_)
    if (!pa.contains(n)) throw ArgumentError("parent vector is missing node '" + n + "'");
  for (const auto& [k, v] : pa.values)
    if (!mechanisms_.count(k)) throw ArgumentError("parent vector has unknown node '" + k + "'");
}

void Scm::validate(const Intervention& iv) const {
  for (const auto& [k, v] : iv.assignments) {
    if (k == image_node_) throw ArgumentError("the image node cannot be intervened on");
    auto it = mechanisms_.find(k);
    if (it == mechanisms_.end()) {
      std::string valid;
      for (const auto& n : order_) valid += (valid.empty() ? "" : ", ") + n;
      throw ArgumentError("unknown node '" + k + "' in intervention (valid nodes: " + valid + ")");
    }
    if (!it->second.domain.contains(v)) {
      std::ostringstream os;
      const auto& d = it->second.domain;
      os << "intervention value " << v << " outside the declared range of '" << k << "' [";
      if (d.kind == NodeKind::Categorical)
        os << "0.." << d.categories - 1 << "]";
      else
        os << d.lo << ", " << d.hi << "]";
      throw DomainError(k, os.str());
    }
  }
}

namespace {

std::vector<double> gather(const ParentVector& pa, const std::vector<std::string>& names) {
  std::vector<double> out;
  out.reserve(names.size());
  for (const auto& n : names) out.push_back(pa.at(n));
  return out;
}

}  // namespace

std::map<std::string, double> abduct_parents(const Scm& scm, const ParentVector& pa) {
  scm.validate(pa);
  std::map<std::string, double> eps;
  for (const auto& n : scm.order()) {
    const auto& m = scm.mechanism(n);
    auto pv = gather(pa, m.parents);
    eps[n] = m.inverse(pa.at(n), pv);
  }
  return eps;
}

ParentVector restrict_to(const Scm& scm, const ParentVector& pa) {
  ParentVector out;
  for (const auto& n : scm.order()) out[n] = pa.at(n);
  return out;
}

ParentVector counterfactual_parents(const Scm& scm, const ParentVector& pa, const Intervention& iv) {
  scm.validate(iv);
  auto eps = abduct_parents(scm, pa);
  ParentVector out = pa;
  std::set<std::string> changed;
  for (const auto& n : scm.order()) {
    auto it = iv.assignments.find(n);
    if (it != iv.assignments.end()) {
      out.values[n] = it->second;
      if (it->second != pa.at(n)) changed.insert(n);
      continue;
    }
    const auto& m = scm.mechanism(n);
    bool touched = std::any_of(m.parents.begin(), m.parents.end(),
                               [&](const std::string& p) { return changed.count(p) != 0; });
    if (!touched) continue;  // same noise, same parents: value is unchanged
    out.values[n] = m.forward(gather(out, m.parents), eps.at(n));
    if (out.values[n] != pa.at(n)) changed.insert(n);
  }
  return out;
}

torch::Tensor counterfactual_image(const Scm& scm, const torch::Tensor& x,
                                   std::span<const ParentVector> pa, const Intervention& iv,
                                   AbductionMode mode) {
  const ImageMechanism* mech = scm.image_mechanism();
  if (mech == nullptr || !mech->trained()) throw StateError("image mechanism is not trained");
  if (!mech->supports(mode))
    throw ConfigError("image mechanism does not support " + to_string(mode) + " abduction");
  if (x.dim() != 4 || x.size(0) != static_cast<int64_t>(pa.size()))
    throw ArgumentError("image batch and parent list sizes differ");
  std::vector<ParentVector> cf;
  cf.reserve(pa.size());
  for (const auto& p : pa) cf.push_back(counterfactual_parents(scm, p, iv));
  return mech->counterfactual(x, pa, cf, mode);
}

}  // namespace dscm
