#include "gd2rl/grid.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

namespace gd2rl {

namespace {

enum class Section { None, Bus, Branch, Transformer, Generator, Pv };

std::string strip_comment(const std::string& line)
{
    const auto hash = line.find('#');
    std::string s = hash == std::string::npos ? line : line.substr(0, hash);
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

class LineReader {
public:
    LineReader(const std::string& text, std::string where) : in_(text), where_(std::move(where)) {}

    template <typename T>
    T next(const char* field)
    {
        T value{};
        if (!(in_ >> value)) throw ParseError(where_ + ": missing or malformed field '" + field + "'");
        return value;
    }

    bool next_flag(const char* field)
    {
        const int v = next<int>(field);
        if (v != 0 && v != 1) throw ParseError(where_ + ": field '" + std::string(field) + "' must be 0 or 1");
        return v == 1;
    }

    bool has_more()
    {
        in_ >> std::ws;
        return !in_.eof();
    }

    void finish()
    {
        if (has_more()) throw ParseError(where_ + ": trailing fields");
    }

    const std::string& where() const { return where_; }

private:
    std::istringstream in_;
    std::string where_;
};

BusKind parse_kind(const std::string& s, const std::string& where)
{
    if (s == "slack") return BusKind::Slack;
    if (s == "pv") return BusKind::PV;
    if (s == "pq") return BusKind::PQ;
    throw ParseError(where + ": unknown bus kind '" + s + "'");
}

const char* kind_name(BusKind k)
{
    switch (k) {
    case BusKind::Slack: return "slack";
    case BusKind::PV: return "pv";
    case BusKind::PQ: return "pq";
    }
    return "pq";
}

}  // namespace

NetworkCase parse_case(const std::string& text, const std::string& origin)
{
    NetworkCase net;
    Section section = Section::None;
    std::istringstream in(text);
    std::string raw;
    int lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const std::string line = strip_comment(raw);
        if (line.empty()) continue;
        const std::string where = origin + ":" + std::to_string(lineno);
        if (line.front() == '[') {
            if (line == "[bus]") section = Section::Bus;
            else if (line == "[branch]") section = Section::Branch;
            else if (line == "[transformer]") section = Section::Transformer;
            else if (line == "[generator]") section = Section::Generator;
            else if (line == "[pv]") section = Section::Pv;
            else throw ParseError(where + ": unknown section " + line);
            continue;
        }
        LineReader r(line, where);
        switch (section) {
        case Section::None: {
            const auto key = r.next<std::string>("key");
            if (key != "base_mva") throw ParseError(where + ": unexpected entry '" + key + "' before first section");
            net.base_mva = r.next<double>("base_mva");
            break;
        }
        case Section::Bus: {
            BusRecord b;
            b.id = r.next<int>("id");
            b.kind = parse_kind(r.next<std::string>("kind"), where);
            b.v_setpoint = r.next<double>("v_setpoint");
            b.p_load = r.next<double>("p_load");
            b.q_load = r.next<double>("q_load");
            b.v_min = r.next<double>("v_min");
            b.v_max = r.next<double>("v_max");
            net.buses.push_back(b);
            break;
        }
        case Section::Branch: {
            BranchRecord br;
            br.id = r.next<int>("id");
            br.from_bus = r.next<int>("from_bus");
            br.to_bus = r.next<int>("to_bus");
            br.r = r.next<double>("r");
            br.x = r.next<double>("x");
            br.b = r.next<double>("b");
            br.faultable = r.next_flag("faultable");
            net.branches.push_back(br);
            break;
        }
        case Section::Transformer: {
            TransformerRecord tr;
            tr.id = r.next<int>("id");
            tr.from_bus = r.next<int>("from_bus");
            tr.to_bus = r.next<int>("to_bus");
            tr.r = r.next<double>("r");
            tr.x = r.next<double>("x");
            tr.b = r.next<double>("b");
            tr.tap = r.next<double>("tap");
            net.transformers.push_back(tr);
            break;
        }
        case Section::Generator: {
            GeneratorRecord g;
            g.bus = r.next<int>("bus");
            g.p_out = r.next<double>("p_out");
            g.p_min = r.next<double>("p_min");
            g.p_max = r.next<double>("p_max");
            g.h = r.next<double>("h");
            g.xdp = r.next<double>("xdp");
            g.d = r.next<double>("d");
            g.cost = r.next<double>("cost");
            g.adjustable = r.next_flag("adjustable");
            net.generators.push_back(g);
            break;
        }
        case Section::Pv: {
            PvRecord pv;
            pv.bus = r.next<int>("bus");
            pv.p_mean = r.next<double>("p_mean");
            pv.sigma = r.next<double>("sigma");
            pv.p_cap = r.next<double>("p_cap");
            if (r.has_more()) {
                const auto dist = r.next<std::string>("distribution");
                if (dist == "truncnormal") pv.distribution = PvDistribution::TruncatedNormal;
                else if (dist == "uniform") pv.distribution = PvDistribution::Uniform;
                else throw ParseError(where + ": unknown distribution '" + dist + "'");
            }
            net.pv_units.push_back(pv);
            break;
        }
        }
        r.finish();
    }
    net.finalize();
    return net;
}

NetworkCase load_case(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open case file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_case(buf.str(), path);
}

std::string format_case(const NetworkCase& net)
{
    std::ostringstream out;
    out << std::setprecision(17);
    out << "base_mva " << net.base_mva << "\n\n[bus]\n";
    for (const auto& b : net.buses)
        out << b.id << ' ' << kind_name(b.kind) << ' ' << b.v_setpoint << ' ' << b.p_load << ' ' << b.q_load
            << ' ' << b.v_min << ' ' << b.v_max << '\n';
    out << "\n[branch]\n";
    for (const auto& br : net.branches)
        out << br.id << ' ' << br.from_bus << ' ' << br.to_bus << ' ' << br.r << ' ' << br.x << ' ' << br.b << ' '
            << (br.faultable ? 1 : 0) << '\n';
    out << "\n[transformer]\n";
    for (const auto& tr : net.transformers)
        out << tr.id << ' ' << tr.from_bus << ' ' << tr.to_bus << ' ' << tr.r << ' ' << tr.x << ' ' << tr.b << ' '
            << tr.tap << '\n';
    out << "\n[generator]\n";
    for (const auto& g : net.generators)
        out << g.bus << ' ' << g.p_out << ' ' << g.p_min << ' ' << g.p_max << ' ' << g.h << ' ' << g.xdp << ' '
            << g.d << ' ' << g.cost << ' ' << (g.adjustable ? 1 : 0) << '\n';
    out << "\n[pv]\n";
    for (const auto& pv : net.pv_units)
        out << pv.bus << ' ' << pv.p_mean << ' ' << pv.sigma << ' ' << pv.p_cap << ' '
            << (pv.distribution == PvDistribution::Uniform ? "uniform" : "truncnormal") << '\n';
    return out.str();
}

}  // namespace gd2rl
