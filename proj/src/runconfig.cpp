#include "forgelab/runconfig.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace forgelab {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    std::size_t b = s.find_last_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

std::string join(const std::vector<std::string>& parts) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += ",";
        out += parts[i];
    }
    return out;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

struct KeyHandler {
    std::string key;
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
};

long long parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const long long r = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected integer, got '" + v + "'");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double r = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "': expected boolean, got '" + v + "'");
}

class Registry {
public:
    void add_int(const std::string& key, int& ref) {
        items.push_back({key, [key, &ref](const std::string& v) { ref = static_cast<int>(parse_int(key, v)); },
                         [&ref]() { return std::to_string(ref); }});
    }
    void add_u64(const std::string& key, std::uint64_t& ref) {
        items.push_back({key,
                         [key, &ref](const std::string& v) { ref = static_cast<std::uint64_t>(parse_int(key, v)); },
                         [&ref]() { return std::to_string(ref); }});
    }
    void add_double(const std::string& key, double& ref) {
        items.push_back({key, [key, &ref](const std::string& v) { ref = parse_double(key, v); },
                         [&ref]() { return fmt_double(ref); }});
    }
    void add_bool(const std::string& key, bool& ref) {
        items.push_back({key, [key, &ref](const std::string& v) { ref = parse_bool(key, v); },
                         [&ref]() { return ref ? std::string("true") : std::string("false"); }});
    }
    void add_string(const std::string& key, std::string& ref) {
        items.push_back({key, [&ref](const std::string& v) { ref = v; }, [&ref]() { return ref; }});
    }
    void add_list(const std::string& key, std::vector<std::string>& ref) {
        items.push_back({key, [&ref](const std::string& v) { ref = split_list(v); },
                         [&ref]() { return join(ref); }});
    }

    std::vector<KeyHandler> items;
};

Registry build_registry(RunConfig& c) {
    Registry r;
    r.add_u64("run.seed", c.seed);

    r.add_int("policy.grid_n", c.policy.grid_n);
    r.add_list("policy.colors", c.policy.colors);
    r.add_list("policy.shapes", c.policy.shapes);
    r.add_int("policy.d_model", c.policy.d_model);
    r.add_int("policy.n_heads", c.policy.n_heads);
    r.add_int("policy.vision_blocks", c.policy.vision_blocks);
    r.add_int("policy.lm_blocks", c.policy.lm_blocks);
    r.add_int("policy.instr_vocab", c.policy.instr_vocab);
    r.add_int("policy.action_vocab", c.policy.action_vocab);
    r.add_int("policy.max_action_len", c.policy.max_action_len);

    r.add_int("data.count", c.data.count);
    r.add_double("data.forget_fraction", c.data.forget_fraction);
    r.add_string("data.forget_color", c.data.forget_color);
    r.add_double("data.train_fraction", c.data.train_fraction);
    r.add_double("data.val_fraction", c.data.val_fraction);
    r.add_int("data.min_objects", c.data.min_objects);
    r.add_int("data.max_objects", c.data.max_objects);
    r.add_int("data.m_per_forget", c.m_per_forget);

    r.add_int("train.epochs", c.train.epochs);
    r.add_double("train.lr", c.train.lr);
    r.add_int("train.batch_size", c.train.batch_size);
    r.add_double("train.clip_norm", c.train.clip_norm);
    r.add_double("train.acc_gate", c.train.acc_gate);

    r.add_double("unlearn.lambda_f", c.unlearn.lambda_f);
    r.add_double("unlearn.lambda_m", c.unlearn.lambda_m);
    r.add_double("unlearn.lambda_feat", c.unlearn.lambda_feat);
    r.add_double("unlearn.beta_kl", c.unlearn.beta_kl);
    r.add_double("unlearn.alpha_ratio", c.unlearn.alpha_ratio);
    r.add_double("unlearn.gamma_feat", c.unlearn.gamma_feat);
    r.add_double("unlearn.eps", c.unlearn.eps);
    r.add_int("unlearn.k_vision", c.unlearn.k_vision);
    r.add_int("unlearn.k_projector", c.unlearn.k_projector);
    r.add_int("unlearn.k_reasoning", c.unlearn.k_reasoning);
    r.add_double("unlearn.tau_vision", c.unlearn.tau_vision);
    r.add_double("unlearn.tau_projector", c.unlearn.tau_projector);
    r.add_double("unlearn.tau_reasoning", c.unlearn.tau_reasoning);
    r.add_int("unlearn.steps_vision", c.unlearn.steps_vision);
    r.add_int("unlearn.steps_projector", c.unlearn.steps_projector);
    r.add_int("unlearn.steps_reasoning", c.unlearn.steps_reasoning);
    r.add_double("unlearn.lr", c.unlearn.lr);
    r.add_double("unlearn.stop_forget_acc", c.unlearn.stop_forget_acc);
    r.add_double("unlearn.stop_retain_frac", c.unlearn.stop_retain_frac);
    r.add_int("unlearn.eval_every", c.unlearn.eval_every);
    r.add_int("unlearn.batch_forget", c.unlearn.batch_forget);
    r.add_int("unlearn.batch_retain", c.unlearn.batch_retain);
    r.add_int("unlearn.batch_boundary", c.unlearn.batch_boundary);
    r.add_int("unlearn.selection_episodes", c.unlearn.selection_episodes);
    r.add_int("unlearn.eval_episodes", c.unlearn.eval_episodes);
    r.add_int("unlearn.lora_rank", c.unlearn.lora_rank);
    r.add_double("unlearn.lora_alpha", c.unlearn.lora_alpha);
    r.add_double("unlearn.lora_dropout", c.unlearn.lora_dropout);
    r.add_bool("unlearn.include_action_rows", c.unlearn.include_action_rows);
    r.add_list("unlearn.stages", c.unlearn.stages);

    r.add_string("baseline.method", c.baseline.method);
    r.add_double("baseline.lr", c.baseline.lr);
    r.add_int("baseline.steps", c.baseline.steps);
    r.add_int("baseline.batch", c.baseline.batch);
    r.add_double("baseline.npo_beta", c.baseline.npo_beta);
    r.add_double("baseline.ssd_threshold", c.baseline.ssd_threshold);
    r.add_double("baseline.ssd_floor", c.baseline.ssd_floor);
    r.add_double("baseline.salun_top_fraction", c.baseline.salun_top_fraction);
    r.add_double("baseline.retain_weight", c.baseline.retain_weight);
    r.add_double("baseline.ga_retain_weight", c.baseline.ga_retain_weight);
    r.add_int("baseline.lora_rank", c.baseline.lora_rank);
    r.add_double("baseline.lora_alpha", c.baseline.lora_alpha);

    r.add_int("audit.rollout_max_steps", c.audit.rollout_max_steps);
    r.add_string("audit.eval_scope", c.audit.eval_scope);
    return r;
}

}  // namespace

void RunConfig::set(const std::string& dotted_key, const std::string& value) {
    Registry reg = build_registry(*this);
    for (auto& h : reg.items) {
        if (h.key == dotted_key) {
            h.set(value);
            return;
        }
    }
    throw ConfigError("unknown config key '" + dotted_key + "'");
}

void RunConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']') throw ConfigError(path + ":" + std::to_string(lineno) + ": malformed section header");
            section = trim(t.substr(1, t.size() - 2));
            continue;
        }
        const std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        const std::string dotted = section.empty() ? key : section + "." + key;
        set(dotted, value);
    }
}

void RunConfig::apply_overrides(const std::vector<std::string>& key_value_pairs) {
    for (const auto& kv : key_value_pairs) {
        const std::size_t eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not of the form key=value");
        set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }
}

std::string RunConfig::resolved_text() const {
    Registry reg = build_registry(const_cast<RunConfig&>(*this));
    std::vector<std::pair<std::string, std::string>> entries;
    for (auto& h : reg.items) entries.emplace_back(h.key, h.get());
    std::sort(entries.begin(), entries.end());
    std::string out;
    for (const auto& [k, v] : entries) out += k + " = " + v + "\n";
    return out;
}

std::string RunConfig::config_hash() const { return to_hex(fnv1a64(resolved_text())); }

std::string RunConfig::policy_hash() const {
    Registry reg = build_registry(const_cast<RunConfig&>(*this));
    std::vector<std::pair<std::string, std::string>> entries;
    for (auto& h : reg.items)
        if (h.key.rfind("policy.", 0) == 0) entries.emplace_back(h.key, h.get());
    std::sort(entries.begin(), entries.end());
    std::string out;
    for (const auto& [k, v] : entries) out += k + " = " + v + "\n";
    return to_hex(fnv1a64(out));
}

void RunConfig::validate() const {
    policy.validate();
    unlearn.validate();
    baseline.validate();
    audit.validate();
    if (data.count < 1) throw ConfigError("data.count must be >= 1");
    if (data.forget_fraction <= 0.0 || data.forget_fraction >= 1.0)
        throw ConfigError("data.forget_fraction must lie in (0, 1)");
    if (data.train_fraction + data.val_fraction >= 1.0)
        throw ConfigError("train/val fractions must leave room for a test split");
    if (train.epochs < 0) throw ConfigError("train.epochs must be >= 0");
    if (train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (m_per_forget < 1) throw ConfigError("data.m_per_forget must be >= 1");
}

}  // namespace forgelab
