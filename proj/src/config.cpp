#include "capscl/config.hpp"

#include <fstream>
#include <set>

namespace capscl {

using nlohmann::json;

namespace {

class Section {
public:
    Section(const json& j, std::string name, std::set<std::string> keys)
        : j_(j), name_(std::move(name)) {
        if (!j_.is_object()) fail(name_.empty() ? "config" : name_, "expected an object");
        for (const auto& [k, v] : j_.items())
            if (!keys.count(k)) fail(path(k), "unknown key");
    }

    void get(const char* key, std::size_t& out) const {
        if (!j_.contains(key)) return;
        const json& v = j_.at(key);
        if (!v.is_number_unsigned()) fail(path(key), "expected an unsigned integer");
        out = v.get<std::size_t>();
    }
    void get(const char* key, double& out) const {
        if (!j_.contains(key)) return;
        const json& v = j_.at(key);
        if (!v.is_number()) fail(path(key), "expected a number");
        out = v.get<double>();
    }
    void get(const char* key, bool& out) const {
        if (!j_.contains(key)) return;
        const json& v = j_.at(key);
        if (!v.is_boolean()) fail(path(key), "expected true or false");
        out = v.get<bool>();
    }
    void get(const char* key, std::string& out) const {
        if (!j_.contains(key)) return;
        const json& v = j_.at(key);
        if (!v.is_string()) fail(path(key), "expected a string");
        out = v.get<std::string>();
    }
    /// Parses a string field through `convert`, reporting its exception as a config error.
    template <class T, class F>
    void get_enum(const char* key, T& out, F convert) const {
        std::string s;
        if (!j_.contains(key)) return;
        get(key, s);
        try {
            out = convert(s);
        } catch (const std::invalid_argument& e) {
            fail(path(key), e.what());
        }
    }
    void get(const char* key, std::vector<std::uint64_t>& out) const {
        if (!j_.contains(key)) return;
        const json& v = j_.at(key);
        if (!v.is_array()) fail(path(key), "expected an array of unsigned integers");
        out.clear();
        for (const auto& e : v) {
            if (!e.is_number_unsigned()) fail(path(key), "expected an array of unsigned integers");
            out.push_back(e.get<std::uint64_t>());
        }
    }
    const json* child(const char* key) const { return j_.contains(key) ? &j_.at(key) : nullptr; }

private:
    std::string path(const std::string& key) const { return name_.empty() ? key : name_ + "." + key; }
    [[noreturn]] static void fail(const std::string& where, const std::string& what) {
        throw ConfigError(where + ": " + what);
    }

    const json& j_;
    std::string name_;
};

}  // namespace

void RunConfig::validate() const {
    try {
        model.validate();
        trainer.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

RunConfig config_from_json(const json& j) {
    RunConfig c;
    Section top(j, "", {"backbone", "ksm", "tsm", "trainer", "paths"});
    if (const json* b = top.child("backbone")) {
        Section s(*b, "backbone", {"vocab_size", "max_tokens", "embed_dim", "num_layers", "num_heads", "ffn_dim",
                                   "plugin_placement", "dropout"});
        auto& bc = c.model.backbone;
        s.get("vocab_size", bc.vocab_size);
        s.get("max_tokens", bc.max_tokens);
        s.get("embed_dim", bc.embed_dim);
        s.get("num_layers", bc.num_layers);
        s.get("num_heads", bc.num_heads);
        s.get("ffn_dim", bc.ffn_dim);
        s.get_enum("plugin_placement", bc.placement, placement_from_string);
        s.get("dropout", bc.dropout);
    }
    if (const json* k = top.child("ksm")) {
        Section s(*k, "ksm", {"num_transfer_capsules", "capsule_dim", "route_dim", "window", "temperature"});
        auto& kc = c.model.ksm;
        s.get("num_transfer_capsules", kc.num_transfer_capsules);
        s.get("capsule_dim", kc.capsule_dim);
        s.get("route_dim", kc.route_dim);
        s.get("window", kc.window);
        s.get("temperature", kc.temperature);
    }
    if (const json* t = top.child("tsm")) {
        Section s(*t, "tsm", {"width", "s_max", "clamp", "gradient_compensation"});
        auto& tc = c.model.tsm;
        s.get("width", tc.width);
        s.get("s_max", tc.s_max);
        s.get("clamp", tc.clamp);
        s.get("gradient_compensation", tc.gradient_compensation);
    }
    if (const json* t = top.child("trainer")) {
        Section s(*t, "trainer", {"mode", "lr", "batch_size", "epochs", "patience", "seeds"});
        auto& tc = c.trainer;
        s.get_enum("mode", tc.mode, mode_from_string);
        s.get("lr", tc.lr);
        s.get("batch_size", tc.batch_size);
        s.get("epochs", tc.epochs);
        s.get("patience", tc.patience);
        s.get("seeds", tc.seeds);
    }
    if (const json* p = top.child("paths")) {
        Section s(*p, "paths", {"suite", "out"});
        s.get("suite", c.paths.suite);
        s.get("out", c.paths.out);
    }
    c.validate();
    return c;
}

json config_to_json(const RunConfig& c) {
    const auto& b = c.model.backbone;
    const auto& k = c.model.ksm;
    const auto& t = c.model.tsm;
    const auto& r = c.trainer;
    json j;
    j["backbone"] = {{"vocab_size", b.vocab_size},   {"max_tokens", b.max_tokens},
                     {"embed_dim", b.embed_dim},     {"num_layers", b.num_layers},
                     {"num_heads", b.num_heads},     {"ffn_dim", b.ffn_dim},
                     {"plugin_placement", to_string(b.placement)}, {"dropout", b.dropout}};
    j["ksm"] = {{"num_transfer_capsules", k.num_transfer_capsules},
                {"capsule_dim", k.capsule_dim},
                {"route_dim", k.route_dim},
                {"window", k.window},
                {"temperature", k.temperature}};
    j["tsm"] = {{"width", t.width},
                {"s_max", t.s_max},
                {"clamp", t.clamp},
                {"gradient_compensation", t.gradient_compensation}};
    j["trainer"] = {{"mode", to_string(r.mode)}, {"lr", r.lr},         {"batch_size", r.batch_size},
                    {"epochs", r.epochs},        {"patience", r.patience}, {"seeds", r.seeds}};
    j["paths"] = {{"suite", c.paths.suite}, {"out", c.paths.out}};
    return j;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path.string() + ": cannot open config file");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

}  // namespace capscl
