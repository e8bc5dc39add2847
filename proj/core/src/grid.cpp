#include "gd2rl/grid.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <queue>
#include <sstream>

namespace gd2rl {

namespace {

[[noreturn]] void fail(const std::string& what) { throw ValidationError(what); }

}  // namespace

void NetworkCase::finalize()
{
    if (buses.empty()) fail("case has no buses");
    if (!(base_mva > 0.0)) fail("base_mva must be positive");

    int max_id = 0;
    for (const auto& b : buses) {
        if (b.id <= 0) fail("bus " + std::to_string(b.id) + ": id must be positive");
        max_id = std::max(max_id, b.id);
    }
    id_to_index_.assign(static_cast<std::size_t>(max_id) + 1, static_cast<int>(-1));
    std::size_t slack_count = 0;
    for (std::size_t i = 0; i < buses.size(); ++i) {
        const auto& b = buses[i];
        if (id_to_index_[b.id] != -1) fail("bus " + std::to_string(b.id) + ": duplicate id");
        id_to_index_[b.id] = static_cast<int>(i);
        if (!(b.v_min < b.v_max)) fail("bus " + std::to_string(b.id) + ": v_min must be below v_max");
        if (!std::isfinite(b.p_load) || !std::isfinite(b.q_load))
            fail("bus " + std::to_string(b.id) + ": non-finite load");
        if (b.kind == BusKind::Slack) {
            ++slack_count;
            slack_bus_ = i;
        }
    }
    if (slack_count != 1)
        fail("case must have exactly one slack bus, found " + std::to_string(slack_count));

    auto require_bus = [&](int id, const std::string& who) {
        if (id <= 0 || id > max_id || id_to_index_[id] == -1)
            fail(who + ": unknown bus " + std::to_string(id));
    };

    elements_.clear();
    std::vector<int> seen_lines;
    for (const auto& br : branches) {
        const std::string who = "branch " + std::to_string(br.id);
        require_bus(br.from_bus, who);
        require_bus(br.to_bus, who);
        if (br.x == 0.0) fail(who + ": zero reactance");
        if (br.from_bus == br.to_bus) fail(who + ": both ends on the same bus");
        if (std::find(seen_lines.begin(), seen_lines.end(), br.id) != seen_lines.end())
            fail(who + ": duplicate id");
        if (br.id <= 0) fail(who + ": id must be positive");
        seen_lines.push_back(br.id);
        elements_.push_back({bus_index(br.from_bus), bus_index(br.to_bus), br.r, br.x, br.b, 1.0, br.id});
    }
    for (const auto& tr : transformers) {
        const std::string who = "transformer " + std::to_string(tr.id);
        require_bus(tr.from_bus, who);
        require_bus(tr.to_bus, who);
        if (tr.x == 0.0) fail(who + ": zero reactance");
        if (!(tr.tap > 0.0)) fail(who + ": tap must be positive");
        elements_.push_back({bus_index(tr.from_bus), bus_index(tr.to_bus), tr.r, tr.x, tr.b, tr.tap, 0});
    }

    adjustable_.clear();
    bool slack_gen_found = false;
    for (std::size_t g = 0; g < generators.size(); ++g) {
        const auto& gen = generators[g];
        const std::string who = "generator G" + std::to_string(g + 1);
        require_bus(gen.bus, who);
        if (!(gen.p_min <= gen.p_out && gen.p_out <= gen.p_max))
            fail(who + ": p_out outside [p_min, p_max]");
        if (!(gen.h > 0.0)) fail(who + ": inertia must be positive");
        if (!(gen.xdp > 0.0)) fail(who + ": transient reactance must be positive");
        const auto kind = buses[bus_index(gen.bus)].kind;
        if (kind == BusKind::PQ) fail(who + ": connected to a PQ bus");
        if (bus_index(gen.bus) == slack_bus_) {
            if (gen.adjustable) fail(who + ": slack machine cannot be adjustable");
            if (slack_gen_found) fail(who + ": second machine on the slack bus");
            slack_gen_ = g;
            slack_gen_found = true;
        }
        if (gen.adjustable) adjustable_.push_back(g);
    }
    if (!slack_gen_found) fail("no generator on the slack bus");

    for (std::size_t k = 0; k < pv_units.size(); ++k) {
        const auto& pv = pv_units[k];
        const std::string who = "pv unit PV" + std::to_string(k + 1);
        require_bus(pv.bus, who);
        if (!(0.0 <= pv.p_mean && pv.p_mean <= pv.p_cap)) fail(who + ": p_mean outside [0, p_cap]");
        if (!(pv.sigma >= 0.0)) fail(who + ": negative sigma");
    }

    if (!connected()) fail("network graph is not connected");
}

std::size_t NetworkCase::bus_index(int bus_id) const
{
    if (bus_id <= 0 || static_cast<std::size_t>(bus_id) >= id_to_index_.size() || id_to_index_[bus_id] < 0)
        throw ValidationError("unknown bus " + std::to_string(bus_id));
    return static_cast<std::size_t>(id_to_index_[bus_id]);
}

std::size_t NetworkCase::line_position(int line_id) const
{
    for (std::size_t i = 0; i < branches.size(); ++i)
        if (branches[i].id == line_id) return i;
    throw ValidationError("unknown branch " + std::to_string(line_id));
}

std::size_t NetworkCase::line_element(int line_id) const
{
    for (std::size_t i = 0; i < elements_.size(); ++i)
        if (elements_[i].line_id == line_id) return i;
    throw ValidationError("unknown branch " + std::to_string(line_id));
}

std::vector<int> NetworkCase::faultable_lines() const
{
    std::vector<int> ids;
    for (const auto& br : branches)
        if (br.faultable) ids.push_back(br.id);
    return ids;
}

bool NetworkCase::connected_without(std::size_t removed) const
{
    const std::size_t n = buses.size();
    std::vector<std::vector<std::size_t>> adj(n);
    for (std::size_t e = 0; e < elements_.size(); ++e) {
        if (e == removed) continue;
        adj[elements_[e].from].push_back(elements_[e].to);
        adj[elements_[e].to].push_back(elements_[e].from);
    }
    std::vector<char> seen(n, 0);
    std::queue<std::size_t> frontier;
    frontier.push(slack_bus_);
    seen[slack_bus_] = 1;
    std::size_t count = 1;
    while (!frontier.empty()) {
        const auto u = frontier.front();
        frontier.pop();
        for (auto v : adj[u]) {
            if (!seen[v]) {
                seen[v] = 1;
                ++count;
                frontier.push(v);
            }
        }
    }
    return count == n;
}

bool NetworkCase::connected() const { return connected_without(static_cast<std::size_t>(-1)); }

void validate_contingency(const NetworkCase& net, const Contingency& c)
{
    if (c.is_none()) return;
    const auto& br = net.branches.at(net.line_position(c.branch_id));
    if (!br.faultable) throw ValidationError("branch " + std::to_string(c.branch_id) + " is not faultable");
    if (!(c.location > 0.0 && c.location < 1.0))
        throw ValidationError("fault location must lie strictly inside the line");
    if (!(c.t_clear > 0.0)) throw ValidationError("clearing time must be positive");
}

std::string shipped_case_path(const std::string& name)
{
    namespace fs = std::filesystem;
    if (const char* env = std::getenv("GD2RL_DATA_DIR")) {
        fs::path p = fs::path(env) / name;
        if (fs::exists(p)) return p.string();
    }
#ifdef GD2RL_DATA_DIR
    {
        fs::path p = fs::path(GD2RL_DATA_DIR) / name;
        if (fs::exists(p)) return p.string();
    }
#endif
    return (fs::path("core/data") / name).string();
}

OperatingState nominal_state(const NetworkCase& net)
{
    OperatingState s;
    for (const auto& g : net.generators) {
        s.gen_p.push_back(g.p_out);
        s.gen_v.push_back(net.buses[net.bus_index(g.bus)].v_setpoint);
    }
    for (const auto& b : net.buses) {
        s.load_p.push_back(b.p_load);
        s.load_q.push_back(b.q_load);
    }
    for (const auto& pv : net.pv_units) s.pv_p.push_back(pv.p_mean);
    return s;
}

double net_injection(const OperatingState& state)
{
    double total = 0.0;
    for (double p : state.gen_p) total += p;
    for (double p : state.pv_p) total += p;
    for (double p : state.load_p) total -= p;
    return total;
}

}  // namespace gd2rl
