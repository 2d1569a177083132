#include "forgelab/world.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "forgelab/rng.hpp"

namespace forgelab {

using json = nlohmann::json;

Similarity episode_similarity(const Episode& a, const Episode& b) {
    Similarity s;
    for (const auto& oa : a.scene.objects)
        for (const auto& ob : b.scene.objects)
            if (oa.color == ob.color && oa.shape == ob.shape && oa.cell == ob.cell) ++s.shared_objects;

    auto cells_of = [](const GridScene& sc) {
        std::vector<Cell> cells;
        for (const auto& o : sc.objects) cells.push_back(o.cell);
        std::sort(cells.begin(), cells.end());
        return cells;
    };
    s.layout_equal = (cells_of(a.scene) == cells_of(b.scene) && a.scene.agent == b.scene.agent) ? 1 : 0;

    const auto& ta = a.instruction.tokens;
    const auto& tb = b.instruction.tokens;
    const std::size_t n = std::min(ta.size(), tb.size());
    for (std::size_t i = 0; i < n; ++i)
        if (ta[i] == tb[i]) ++s.instr_overlap;
    return s;
}

namespace {

const SceneObject* find_unique_target(const GridScene& scene, const Instruction& instr) {
    const SceneObject* found = nullptr;
    for (const auto& o : scene.objects) {
        if (o.color == instr.target_color && o.shape == instr.target_shape) {
            if (found) return nullptr;  // ambiguous
            found = &o;
        }
    }
    return found;
}

}  // namespace

std::vector<int> expert_actions(const GridScene& scene, const Instruction& instr) {
    const SceneObject* target = find_unique_target(scene, instr);
    if (!target) throw ValueError("expert_actions: instruction target is missing or ambiguous");

    // BFS distances from the target over the open grid.
    const int n = scene.n;
    std::vector<int> dist(static_cast<std::size_t>(n * n), -1);
    std::deque<Cell> queue{target->cell};
    dist[static_cast<std::size_t>(target->cell.row * n + target->cell.col)] = 0;
    const int dr[] = {-1, 1, 0, 0};  // UP DOWN LEFT RIGHT
    const int dc[] = {0, 0, -1, 1};
    while (!queue.empty()) {
        const Cell c = queue.front();
        queue.pop_front();
        const int d = dist[static_cast<std::size_t>(c.row * n + c.col)];
        for (int k = 0; k < 4; ++k) {
            const int r = c.row + dr[k], cc = c.col + dc[k];
            if (r < 0 || r >= n || cc < 0 || cc >= n) continue;
            int& e = dist[static_cast<std::size_t>(r * n + cc)];
            if (e < 0) {
                e = d + 1;
                queue.push_back({r, cc});
            }
        }
    }

    // Walk greedily; trying moves in enum order yields the lexicographically
    // smallest shortest move sequence.
    std::vector<int> tokens{kBos};
    Cell at = scene.agent;
    if (dist[static_cast<std::size_t>(at.row * n + at.col)] < 0)
        throw ValueError("expert_actions: target unreachable");
    while (!(at == target->cell)) {
        const int d = dist[static_cast<std::size_t>(at.row * n + at.col)];
        bool moved = false;
        for (int k = 0; k < 4; ++k) {
            const int r = at.row + dr[k], cc = at.col + dc[k];
            if (r < 0 || r >= n || cc < 0 || cc >= n) continue;
            if (dist[static_cast<std::size_t>(r * n + cc)] == d - 1) {
                tokens.push_back(k);
                at = {r, cc};
                moved = true;
                break;
            }
        }
        if (!moved) throw ValueError("expert_actions: no descending move found");
    }
    tokens.push_back(kGrasp);
    tokens.push_back(kEos);
    return tokens;
}

std::vector<Episode> gen_episodes(std::uint64_t seed, int count, const PolicyConfig& cfg,
                                  const CorpusOptions& opts) {
    if (count < 1) throw ConfigError("gen_episodes: count must be >= 1");
    cfg.validate();
    const int n_colors = static_cast<int>(cfg.colors.size());
    const int n_shapes = static_cast<int>(cfg.shapes.size());
    if (n_colors * n_shapes < opts.max_objects)
        throw ConfigError("gen_episodes: not enough color/shape pairs to keep instruction targets unique");
    if (cfg.grid_n * cfg.grid_n < opts.max_objects + 1)
        throw ConfigError("gen_episodes: grid too small for the requested object count");
    if (opts.forget_fraction < 0.0 || opts.forget_fraction > 1.0)
        throw ConfigError("gen_episodes: forget_fraction must lie in [0, 1]");

    const int forget_color = cfg.color_index(opts.forget_color);

    // Fix the exact number of forget-slice targets, then shuffle positions.
    const int n_forget = static_cast<int>(std::llround(opts.forget_fraction * count));
    std::vector<int> target_colors(static_cast<std::size_t>(count));
    Rng rng(derive_seed(seed, "episodes"));
    for (int i = 0; i < count; ++i) {
        if (i < n_forget) {
            target_colors[static_cast<std::size_t>(i)] = forget_color;
        } else {
            int c = rng.next_int(0, n_colors - 2);
            if (c >= forget_color) ++c;
            target_colors[static_cast<std::size_t>(i)] = c;
        }
    }
    rng.shuffle(target_colors);

    std::vector<Episode> episodes;
    episodes.reserve(static_cast<std::size_t>(count));
    const int g = cfg.grid_n;
    for (int i = 0; i < count; ++i) {
        Episode ep;
        ep.id = i;
        ep.scene.n = g;
        const int n_objects = rng.next_int(opts.min_objects, opts.max_objects);

        // Distinct (color, shape) pairs guarantee a unique instruction target.
        const int target_color = target_colors[static_cast<std::size_t>(i)];
        const int target_shape = rng.next_int(0, n_shapes - 1);
        std::set<std::pair<int, int>> used{{target_color, target_shape}};
        std::vector<std::pair<int, int>> kinds{{target_color, target_shape}};
        while (static_cast<int>(kinds.size()) < n_objects) {
            const std::pair<int, int> k{rng.next_int(0, n_colors - 1), rng.next_int(0, n_shapes - 1)};
            if (used.insert(k).second) kinds.push_back(k);
        }

        std::set<Cell> taken;
        for (const auto& [color, shape] : kinds) {
            Cell c;
            do {
                c = {rng.next_int(0, g - 1), rng.next_int(0, g - 1)};
            } while (!taken.insert(c).second);
            ep.scene.objects.push_back(SceneObject{color, shape, c});
        }
        ep.scene.agent = {rng.next_int(0, g - 1), rng.next_int(0, g - 1)};

        ep.instruction.target_color = target_color;
        ep.instruction.target_shape = target_shape;
        ep.instruction.tokens = {PolicyConfig::kInstrPick, cfg.color_token(target_color),
                                 cfg.shape_token(target_shape)};
        ep.expert_tokens = expert_actions(ep.scene, ep.instruction);
        if (static_cast<int>(ep.expert_tokens.size()) - 2 > cfg.max_action_len)
            throw ConfigError("gen_episodes: expert demonstration exceeds max_action_len");
        ep.labels = {"color:" + cfg.colors[static_cast<std::size_t>(target_color)],
                     "shape:" + cfg.shapes[static_cast<std::size_t>(target_shape)]};
        episodes.push_back(std::move(ep));
    }

    // 70/15/15 split tags assigned by seeded shuffle.
    std::vector<int> order(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng split_rng(derive_seed(seed, "splits"));
    split_rng.shuffle(order);
    const int n_train = static_cast<int>(std::llround(opts.train_fraction * count));
    const int n_val = static_cast<int>(std::llround(opts.val_fraction * count));
    for (int i = 0; i < count; ++i) {
        const int id = order[static_cast<std::size_t>(i)];
        episodes[static_cast<std::size_t>(id)].split = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
    }
    return episodes;
}

DataSplits build_splits(const std::vector<Episode>& episodes, const UnlearnRequest& request,
                        const PolicyConfig& cfg, int m_per_forget) {
    if (m_per_forget < 1) throw ConfigError("build_splits: m_per_forget must be >= 1");
    std::vector<int> forget_idx, other_idx;
    for (std::size_t i = 0; i < episodes.size(); ++i) {
        if (request.matches(episodes[i], cfg)) forget_idx.push_back(static_cast<int>(i));
        else other_idx.push_back(static_cast<int>(i));
    }
    if (forget_idx.empty())
        throw ValueError("build_splits: no episode matches '" + request.kind + "==" + request.value + "'");
    if (other_idx.empty())
        throw ValueError("build_splits: every episode matches '" + request.kind + "==" + request.value +
                         "', retain side is empty");

    DataSplits out;
    std::set<int> boundary_set;
    for (const int fi : forget_idx) {
        // Full sort by descending similarity; ties fall back to episode order.
        std::vector<int> ranked = other_idx;
        std::stable_sort(ranked.begin(), ranked.end(), [&](int a, int b) {
            const Similarity sa = episode_similarity(episodes[static_cast<std::size_t>(fi)],
                                                     episodes[static_cast<std::size_t>(a)]);
            const Similarity sb = episode_similarity(episodes[static_cast<std::size_t>(fi)],
                                                     episodes[static_cast<std::size_t>(b)]);
            if (sa == sb) return a < b;
            return sa > sb;
        });
        for (int k = 0; k < m_per_forget && k < static_cast<int>(ranked.size()); ++k)
            boundary_set.insert(ranked[static_cast<std::size_t>(k)]);
        out.mismatch_pairs.emplace_back(episodes[static_cast<std::size_t>(fi)].id,
                                        episodes[static_cast<std::size_t>(ranked.front())].id);
    }

    for (const int fi : forget_idx) out.forget.push_back(episodes[static_cast<std::size_t>(fi)]);
    for (const int oi : other_idx) {
        if (boundary_set.count(oi)) out.boundary.push_back(episodes[static_cast<std::size_t>(oi)]);
        else out.retain.push_back(episodes[static_cast<std::size_t>(oi)]);
    }
    return out;
}

RolloutOutcome simulate(const std::vector<int>& tokens, const GridScene& scene, const Instruction& instr,
                        int max_steps, int forbidden_color) {
    if (max_steps < 1) throw ConfigError("simulate: max_steps must be >= 1");
    RolloutOutcome out;
    Cell at = scene.agent;
    const int n = scene.n;
    for (const int tok : tokens) {
        if (out.steps >= max_steps) break;
        if (tok == kBos || tok == kPad) continue;
        if (tok == kStop || tok == kEos) break;
        ++out.steps;
        if (tok == kGrasp) {
            for (const auto& o : scene.objects) {
                if (o.cell == at) {
                    out.grasped = o;
                    break;
                }
            }
            if (out.grasped) {
                out.success = out.grasped->color == instr.target_color &&
                              out.grasped->shape == instr.target_shape;
                out.violation = forbidden_color >= 0 && out.grasped->color == forbidden_color;
                break;  // a resolved grasp ends the episode
            }
            continue;  // grasp on an empty cell is a no-op
        }
        switch (tok) {
            case kUp: at.row = std::max(0, at.row - 1); break;
            case kDown: at.row = std::min(n - 1, at.row + 1); break;
            case kLeft: at.col = std::max(0, at.col - 1); break;
            case kRight: at.col = std::min(n - 1, at.col + 1); break;
            default: break;  // unknown ids are inert
        }
    }
    return out;
}

namespace {

json episode_to_json(const Episode& ep) {
    json objs = json::array();
    for (const auto& o : ep.scene.objects)
        objs.push_back({{"color", o.color}, {"shape", o.shape}, {"cell", {o.cell.row, o.cell.col}}});
    return json{{"id", ep.id},
                {"scene", {{"n", ep.scene.n}, {"agent", {ep.scene.agent.row, ep.scene.agent.col}}, {"objects", objs}}},
                {"instruction_tokens", ep.instruction.tokens},
                {"target", {{"color", ep.instruction.target_color}, {"shape", ep.instruction.target_shape}}},
                {"expert_tokens", ep.expert_tokens},
                {"labels", ep.labels},
                {"split", ep.split}};
}

Episode episode_from_json(const json& j) {
    Episode ep;
    ep.id = j.at("id").get<int>();
    ep.scene.n = j.at("scene").at("n").get<int>();
    ep.scene.agent = {j.at("scene").at("agent")[0].get<int>(), j.at("scene").at("agent")[1].get<int>()};
    for (const auto& o : j.at("scene").at("objects"))
        ep.scene.objects.push_back(SceneObject{o.at("color").get<int>(), o.at("shape").get<int>(),
                                               {o.at("cell")[0].get<int>(), o.at("cell")[1].get<int>()}});
    ep.instruction.tokens = j.at("instruction_tokens").get<std::vector<int>>();
    ep.instruction.target_color = j.at("target").at("color").get<int>();
    ep.instruction.target_shape = j.at("target").at("shape").get<int>();
    ep.expert_tokens = j.at("expert_tokens").get<std::vector<int>>();
    ep.labels = j.at("labels").get<std::vector<std::string>>();
    ep.split = j.at("split").get<std::string>();
    return ep;
}

}  // namespace

std::string hash_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string bytes = ss.str();
    return to_hex(fnv1a64(bytes));
}

void write_dataset(const std::string& dir, const std::vector<Episode>& episodes, const DataSplits& splits,
                   const UnlearnRequest& request, const PolicyConfig& cfg) {
    {
        std::ofstream out(dir + "/episodes.jsonl");
        if (!out) throw IoError("cannot write '" + dir + "/episodes.jsonl'");
        for (const auto& ep : episodes) out << episode_to_json(ep).dump() << "\n";
    }
    {
        json vocab = {{"action_tokens", json::array()}, {"instr_tokens", json::array()}};
        for (int a = 0; a < cfg.action_vocab; ++a) vocab["action_tokens"].push_back(action_name(a));
        vocab["instr_tokens"].push_back("<bos_i>");
        vocab["instr_tokens"].push_back("<eos_i>");
        vocab["instr_tokens"].push_back("pick");
        for (const auto& c : cfg.colors) vocab["instr_tokens"].push_back(c);
        for (const auto& s : cfg.shapes) vocab["instr_tokens"].push_back(s);
        vocab["colors"] = cfg.colors;
        vocab["shapes"] = cfg.shapes;
        std::ofstream out(dir + "/vocab.json");
        if (!out) throw IoError("cannot write '" + dir + "/vocab.json'");
        out << vocab.dump(2) << "\n";
    }
    {
        auto ids_of = [](const std::vector<Episode>& eps) {
            std::vector<int> ids;
            for (const auto& e : eps) ids.push_back(e.id);
            return ids;
        };
        json pairs = json::array();
        for (const auto& [f, r] : splits.mismatch_pairs) pairs.push_back({f, r});
        json manifest = {{"request", {{"kind", request.kind}, {"value", request.value}}},
                         {"forget_ids", ids_of(splits.forget)},
                         {"retain_ids", ids_of(splits.retain)},
                         {"boundary_ids", ids_of(splits.boundary)},
                         {"mismatch_pairs", pairs},
                         {"data_hash", hash_file(dir + "/episodes.jsonl")}};
        std::ofstream out(dir + "/splits.json");
        if (!out) throw IoError("cannot write '" + dir + "/splits.json'");
        out << manifest.dump(2) << "\n";
    }
}

LoadedDataset load_dataset(const std::string& dir, const PolicyConfig& cfg) {
    LoadedDataset out;
    {
        std::ifstream in(dir + "/episodes.jsonl");
        if (!in) throw IoError("cannot open '" + dir + "/episodes.jsonl'");
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            out.episodes.push_back(episode_from_json(json::parse(line)));
        }
    }
    std::ifstream in(dir + "/splits.json");
    if (!in) throw IoError("cannot open '" + dir + "/splits.json'");
    json manifest = json::parse(in);
    out.request.kind = manifest.at("request").at("kind").get<std::string>();
    out.request.value = manifest.at("request").at("value").get<std::string>();
    out.data_hash = manifest.at("data_hash").get<std::string>();
    if (out.data_hash != hash_file(dir + "/episodes.jsonl"))
        throw ProvenanceError("episodes.jsonl does not match the hash recorded in splits.json");

    auto pick = [&](const char* key, std::vector<Episode>& dst) {
        for (const int id : manifest.at(key).get<std::vector<int>>()) {
            if (id < 0 || id >= static_cast<int>(out.episodes.size()))
                throw IoError("splits.json references unknown episode id " + std::to_string(id));
            dst.push_back(out.episodes[static_cast<std::size_t>(id)]);
        }
    };
    pick("forget_ids", out.splits.forget);
    pick("retain_ids", out.splits.retain);
    pick("boundary_ids", out.splits.boundary);
    for (const auto& p : manifest.at("mismatch_pairs"))
        out.splits.mismatch_pairs.emplace_back(p[0].get<int>(), p[1].get<int>());
    return out;
}

}  // namespace forgelab
