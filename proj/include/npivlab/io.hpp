#pragma once

#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "npivlab/bspline.hpp"
#include "npivlab/common.hpp"
#include "npivlab/estimators.hpp"
#include "npivlab/evaluation.hpp"
#include "npivlab/simulator.hpp"
#include "npivlab/smoothnet.hpp"

namespace npivlab::io {

using nlohmann::json;

// ---------------------------------------------------------------------------
// JSON serialization of the domain types
// ---------------------------------------------------------------------------

inline json to_json(const splines::SplineExpansion& f) {
    json terms = json::array();
    for (const auto& [idx, beta] : f.terms) {
        json t;
        t["k"] = idx.k;
        t["l"] = idx.loc;
        t["beta"] = beta;
        terms.push_back(std::move(t));
    }
    return json{{"order", f.order}, {"dim", f.dim}, {"terms", std::move(terms)}};
}

inline splines::SplineExpansion expansion_from_json(const json& j) {
    splines::SplineExpansion f;
    f.order = j.at("order").get<int>();
    f.dim = j.at("dim").get<int>();
    for (const auto& t : j.at("terms")) {
        splines::BSplineIndex idx;
        idx.k = t.at("k").get<int>();
        idx.loc = t.at("l").get<std::vector<int>>();
        f.add(idx, t.at("beta").get<double>());
    }
    return f;
}

inline json to_json(const nets::SmoothNet& net) {
    json layers = json::array();
    for (const auto& l : net.layers()) {
        json w = json::array();
        for (Eigen::Index i = 0; i < l.w.rows(); ++i) {
            json row = json::array();
            for (Eigen::Index c = 0; c < l.w.cols(); ++c) row.push_back(l.w(i, c));
            w.push_back(std::move(row));
        }
        json b = json::array();
        for (Eigen::Index i = 0; i < l.b.size(); ++i) b.push_back(l.b[i]);
        layers.push_back(json{{"w", std::move(w)}, {"b", std::move(b)}});
    }
    const auto meta = net.meta();
    return json{{"layers", std::move(layers)},
                {"clip", {{"c_id", net.clip().c_id}, {"c_max", net.clip().c_max}}},
                {"meta",
                 {{"L", meta.depth},
                  {"W", meta.width},
                  {"S", meta.nonzeros},
                  {"M", meta.max_abs}}}};
}

inline nets::SmoothNet net_from_json(const json& j) {
    std::vector<nets::Layer> layers;
    for (const auto& jl : j.at("layers")) {
        const auto& w = jl.at("w");
        const auto& b = jl.at("b");
        nets::Layer l{Eigen::MatrixXd(w.size(), w.empty() ? 0 : w[0].size()),
                      Eigen::VectorXd(b.size())};
        for (std::size_t i = 0; i < w.size(); ++i)
            for (std::size_t c = 0; c < w[i].size(); ++c)
                l.w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) =
                    w[i][c].get<double>();
        for (std::size_t i = 0; i < b.size(); ++i)
            l.b[static_cast<Eigen::Index>(i)] = b[i].get<double>();
        layers.push_back(std::move(l));
    }
    nets::ClipSpec clip{j.at("clip").at("c_id").get<double>(),
                        j.at("clip").at("c_max").get<double>()};
    nets::SmoothNet net(layers, clip);
    // Meta echo must agree with the parameters.
    const auto meta = net.meta();
    const auto& jm = j.at("meta");
    require(jm.at("L").get<int>() == meta.depth && jm.at("W").get<int>() == meta.width &&
                jm.at("S").get<long long>() == meta.nonzeros,
            "net meta does not match its parameters");
    return net;
}

inline json to_json(const sim::NPIVInstance& inst) {
    return json{{"gamma", inst.gamma},     {"K", inst.K},
                {"tau", inst.tau},         {"sigma_eta", inst.sigma_eta},
                {"C", inst.C},             {"seed", inst.seed},
                {"c", inst.c},             {"positivity_margin", inst.positivity_margin()},
                {"f_star", to_json(inst.f_star)}};
}

inline json to_json(const ev::RateReport& r) {
    json points = json::array();
    for (const auto& p : r.points) {
        points.push_back(json{{"m", p.m},
                              {"n", p.n},
                              {"full", p.full},
                              {"projected", p.projected},
                              {"failures", p.failures},
                              {"complete", p.complete},
                              {"median_full", p.median_full},
                              {"median_projected", p.median_projected},
                              {"iqr_full", p.iqr_full},
                              {"iqr_projected", p.iqr_projected}});
    }
    const auto verdict = [](const ev::RateVerdict& v) {
        return json{{"slope", v.slope},       {"intercept", v.intercept}, {"r2", v.r2},
                    {"exponent", v.exponent}, {"tolerance", v.tolerance}, {"pass", v.pass}};
    };
    return json{{"estimator", r.estimator}, {"seed", r.seed},
                {"reps", r.reps},           {"fit_valid", r.fit_valid},
                {"points", std::move(points)}, {"full", verdict(r.full)},
                {"projected", verdict(r.projected)}};
}

inline ev::RateReport rate_report_from_json(const json& j) {
    ev::RateReport r;
    r.estimator = j.at("estimator").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.reps = j.at("reps").get<int>();
    r.fit_valid = j.at("fit_valid").get<bool>();
    for (const auto& jp : j.at("points")) {
        ev::SweepPoint p;
        p.m = jp.at("m").get<std::size_t>();
        p.n = jp.at("n").get<std::size_t>();
        p.full = jp.at("full").get<std::vector<double>>();
        p.projected = jp.at("projected").get<std::vector<double>>();
        p.failures = jp.at("failures").get<std::vector<std::string>>();
        p.complete = jp.at("complete").get<bool>();
        p.median_full = jp.at("median_full").get<double>();
        p.median_projected = jp.at("median_projected").get<double>();
        p.iqr_full = jp.at("iqr_full").get<double>();
        p.iqr_projected = jp.at("iqr_projected").get<double>();
        r.points.push_back(std::move(p));
    }
    const auto verdict = [](const json& v) {
        return ev::RateVerdict{v.at("slope").get<double>(),    v.at("intercept").get<double>(),
                               v.at("r2").get<double>(),       v.at("exponent").get<double>(),
                               v.at("tolerance").get<double>(), v.at("pass").get<bool>()};
    };
    r.full = verdict(j.at("full"));
    r.projected = verdict(j.at("projected"));
    return r;
}

/// Model serialization: ridge heads plus, when present, the feature nets.
inline json to_json(const fit::TwoStageModel& model, const json& config_echo) {
    json jv = json::array();
    for (Eigen::Index i = 0; i < model.v.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index c = 0; c < model.v.cols(); ++c) row.push_back(model.v(i, c));
        jv.push_back(std::move(row));
    }
    json ju = json::array();
    for (Eigen::Index i = 0; i < model.u.size(); ++i) ju.push_back(model.u[i]);
    json j{{"V", std::move(jv)},
           {"u", std::move(ju)},
           {"lambda1", model.lambda1},
           {"lambda2", model.lambda2},
           {"lambda_reg", model.lambda_reg},
           {"q_bar", model.q_bar},
           {"config", config_echo}};
    if (model.psi_nets) {
        json nets_x = json::array();
        for (const auto& nn : model.psi_nets->nets) nets_x.push_back(to_json(nn));
        j["psi_nets"] = std::move(nets_x);
    }
    if (model.phi_nets) {
        json nets_z = json::array();
        for (const auto& nn : model.phi_nets->nets) nets_z.push_back(to_json(nn));
        j["phi_nets"] = std::move(nets_z);
    }
    return j;
}

// ---------------------------------------------------------------------------
// TOML subset reader
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

inline std::string strip_comment(const std::string& line) {
    bool in_str = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') in_str = !in_str;
        if (line[i] == '#' && !in_str) return line.substr(0, i);
    }
    return line;
}

inline json parse_toml_scalar(const std::string& tok, int line_no) {
    const std::string t = trim(tok);
    require(!t.empty(), "empty value on line " + std::to_string(line_no));
    if (t.front() == '"') {
        require(t.size() >= 2 && t.back() == '"',
                "unterminated string on line " + std::to_string(line_no));
        return t.substr(1, t.size() - 2);
    }
    if (t == "true") return true;
    if (t == "false") return false;
    if (t.front() == '[') {
        require(t.back() == ']', "unterminated array on line " + std::to_string(line_no));
        json arr = json::array();
        std::string inner = t.substr(1, t.size() - 2);
        std::string cur;
        int depth = 0;
        bool in_str = false;
        for (char ch : inner) {
            if (ch == '"') in_str = !in_str;
            if (!in_str && ch == '[') ++depth;
            if (!in_str && ch == ']') --depth;
            if (ch == ',' && depth == 0 && !in_str) {
                if (!trim(cur).empty()) arr.push_back(parse_toml_scalar(cur, line_no));
                cur.clear();
            } else {
                cur.push_back(ch);
            }
        }
        if (!trim(cur).empty()) arr.push_back(parse_toml_scalar(cur, line_no));
        return arr;
    }
    // Numeric: integer when it looks like one, float otherwise.
    try {
        std::size_t used = 0;
        if (t.find_first_of(".eE") == std::string::npos) {
            const long long v = std::stoll(t, &used);
            if (used == t.size()) return v;
        }
        const double v = std::stod(t, &used);
        require(used == t.size(), "bad number on line " + std::to_string(line_no));
        return v;
    } catch (const std::exception&) {
        throw ContractError("unparseable value '" + t + "' on line " + std::to_string(line_no));
    }
}

}  // namespace detail

/**
 * Minimal TOML reader covering the configuration dialect: [table.subtable]
 * headers, key = value pairs with strings, booleans, integers, floats and
 * flat arrays, plus # comments. Produces a JSON object tree.
 */
inline json parse_toml(const std::string& text) {
    json root = json::object();
    json* current = &root;
    std::istringstream in(text);
    std::string raw;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const std::string line = detail::trim(detail::strip_comment(raw));
        if (line.empty()) continue;
        if (line.front() == '[') {
            require(line.back() == ']', "bad table header on line " + std::to_string(line_no));
            const std::string path = detail::trim(line.substr(1, line.size() - 2));
            require(!path.empty(), "empty table header on line " + std::to_string(line_no));
            current = &root;
            std::istringstream ps(path);
            std::string part;
            while (std::getline(ps, part, '.')) {
                part = detail::trim(part);
                require(!part.empty(), "bad table path on line " + std::to_string(line_no));
                current = &(*current)[part];
                if (current->is_null()) *current = json::object();
            }
            continue;
        }
        const std::size_t eq = line.find('=');
        require(eq != std::string::npos, "expected key = value on line " + std::to_string(line_no));
        const std::string key = detail::trim(line.substr(0, eq));
        require(!key.empty(), "empty key on line " + std::to_string(line_no));
        (*current)[key] = detail::parse_toml_scalar(line.substr(eq + 1), line_no);
    }
    return root;
}

/// Loads a config file: TOML unless the content starts with '{' (JSON).
inline json load_config(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "cannot open config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) continue;
        if (ch == '{') return json::parse(text);
        break;
    }
    return parse_toml(text);
}

// ---------------------------------------------------------------------------
// Schema validation
// ---------------------------------------------------------------------------

/// A schema node: expected type plus allowed children for objects.
struct Schema {
    enum Kind { object, number, integer, boolean, string, array } kind = object;
    std::vector<std::pair<std::string, Schema>> children;  // for objects

    static Schema num() { return Schema{number, {}}; }
    static Schema integer_() { return Schema{integer, {}}; }
    static Schema boolean_() { return Schema{boolean, {}}; }
    static Schema str() { return Schema{string, {}}; }
    static Schema arr() { return Schema{array, {}}; }
    static Schema obj(std::vector<std::pair<std::string, Schema>> kids) {
        return Schema{object, std::move(kids)};
    }
};

/// Rejects unknown keys and mistyped values; all keys are optional.
inline void validate_schema(const json& j, const Schema& schema, const std::string& where) {
    switch (schema.kind) {
        case Schema::object: {
            require(j.is_object(), where + ": expected a table");
            for (const auto& [key, value] : j.items()) {
                const Schema* child = nullptr;
                for (const auto& [name, s] : schema.children)
                    if (name == key) child = &s;
                require(child != nullptr, where + ": unknown key '" + key + "'");
                validate_schema(value, *child, where + "." + key);
            }
            break;
        }
        case Schema::number:
            require(j.is_number(), where + ": expected a number");
            break;
        case Schema::integer:
            require(j.is_number_integer(), where + ": expected an integer");
            break;
        case Schema::boolean:
            require(j.is_boolean(), where + ": expected a boolean");
            break;
        case Schema::string:
            require(j.is_string(), where + ": expected a string");
            break;
        case Schema::array:
            require(j.is_array(), where + ": expected an array");
            break;
    }
}

// ---------------------------------------------------------------------------
// Artifact emission
// ---------------------------------------------------------------------------

inline constexpr const char* kArtifactVersion = "1";

/// FNV-1a hash of the canonical config dump, echoed into every manifest.
inline std::string config_hash(const json& j) {
    const std::string dump = j.dump();
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : dump) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[19];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

/// Lossless decimal rendering of a double (17 significant digits).
inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Writes a file, refusing to overwrite unless forced.
inline void write_file(const std::string& path, const std::string& content, bool force) {
    namespace fs = std::filesystem;
    if (!force && fs::exists(path))
        throw ContractError("refusing to overwrite existing file (use --force): " + path);
    if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path, std::ios::binary);  // LF endings on every platform
    require(out.good(), "cannot write file: " + path);
    out << content;
}

inline std::string dataset_csv(const sim::StageOneData& d) {
    std::string out = "x,z\n";
    for (std::size_t i = 0; i < d.size(); ++i)
        out += format_double(d.x[i]) + "," + format_double(d.z[i]) + "\n";
    return out;
}

inline std::string dataset_csv(const sim::StageTwoData& d) {
    std::string out = "y,z\n";
    for (std::size_t i = 0; i < d.size(); ++i)
        out += format_double(d.y[i]) + "," + format_double(d.z[i]) + "\n";
    return out;
}

/// Long-format sweep CSV: one row per (m, n, rep, metric).
inline std::string rate_report_csv(const ev::RateReport& r, const std::string& instance_hash) {
    std::string out = "m,n,rep,seed,metric,value,estimator,instance_hash\n";
    for (const auto& p : r.points) {
        for (std::size_t rep = 0; rep < p.full.size(); ++rep) {
            for (const char* metric : {"full", "projected"}) {
                const double v = std::string(metric) == "full" ? p.full[rep] : p.projected[rep];
                out += std::to_string(p.m) + "," + std::to_string(p.n) + "," +
                       std::to_string(rep) + "," + std::to_string(r.seed) + "," + metric + "," +
                       format_double(v) + "," + r.estimator + "," + instance_hash + "\n";
            }
        }
    }
    return out;
}

inline std::string trace_csv(const std::vector<fit::TrainTraceRow>& trace) {
    std::string out = "epoch,stage1_loss,stage2_loss,seminorm_estimate\n";
    for (const auto& row : trace)
        out += std::to_string(row.epoch) + "," + format_double(row.stage1_loss) + "," +
               format_double(row.stage2_loss) + "," + format_double(row.seminorm) + "\n";
    return out;
}

inline json manifest(const std::string& command, const json& config,
                     const std::vector<std::string>& files) {
    return json{{"artifact_version", kArtifactVersion},
                {"command", command},
                {"config_hash", config_hash(config)},
                {"files", files}};
}

}  // namespace npivlab::io
