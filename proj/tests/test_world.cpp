#include "doctest.h"

#include <algorithm>
#include <cstdlib>
#include <set>

#include "forgelab/world.hpp"

using namespace forgelab;

TEST_SUITE_BEGIN("world");

namespace {

PolicyConfig default_cfg() { return PolicyConfig{}; }

Episode make_episode(int id, const GridScene& scene, int color, int shape, const PolicyConfig& cfg) {
    Episode ep;
    ep.id = id;
    ep.scene = scene;
    ep.instruction.target_color = color;
    ep.instruction.target_shape = shape;
    ep.instruction.tokens = {PolicyConfig::kInstrPick, cfg.color_token(color), cfg.shape_token(shape)};
    ep.expert_tokens = expert_actions(scene, ep.instruction);
    ep.labels = {"color:" + cfg.colors[static_cast<std::size_t>(color)]};
    return ep;
}

}  // namespace

TEST_CASE("expert actions: straight line, zero distance, tie-break") {
    GridScene scene;
    scene.n = 3;
    scene.agent = {0, 0};
    scene.objects = {SceneObject{0, 0, {0, 2}}};
    Instruction instr;
    instr.target_color = 0;
    instr.target_shape = 0;

    SUBCASE("agent at (0,0), target at (0,2)") {
        CHECK(expert_actions(scene, instr) == std::vector<int>{kBos, kRight, kRight, kGrasp, kEos});
    }
    SUBCASE("agent already on the target cell") {
        scene.agent = {0, 2};
        CHECK(expert_actions(scene, instr) == std::vector<int>{kBos, kGrasp, kEos});
    }
    SUBCASE("equal-length detour prefers the smaller move id") {
        scene.agent = {0, 0};
        scene.objects[0].cell = {1, 1};
        CHECK(expert_actions(scene, instr) == std::vector<int>{kBos, kDown, kRight, kGrasp, kEos});
    }
    SUBCASE("target above favors UP before anything else") {
        scene.agent = {2, 2};
        scene.objects[0].cell = {0, 1};
        CHECK(expert_actions(scene, instr) == std::vector<int>{kBos, kUp, kUp, kLeft, kGrasp, kEos});
    }
}

TEST_CASE("gen_episodes is deterministic and expert-successful") {
    const PolicyConfig cfg = default_cfg();
    CorpusOptions opts;
    opts.count = 24;
    auto a = gen_episodes(42, 24, cfg, opts);
    auto b = gen_episodes(42, 24, cfg, opts);
    REQUIRE(a.size() == 24);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].expert_tokens == b[i].expert_tokens);
        CHECK(a[i].scene.agent == b[i].scene.agent);
        CHECK(a[i].split == b[i].split);
        const RolloutOutcome out = simulate(a[i].expert_tokens, a[i].scene, a[i].instruction, 64);
        CHECK(out.success);
        CHECK(a[i].scene.objects.size() >= 2);
        CHECK(a[i].scene.objects.size() <= 4);
        std::set<std::pair<int, int>> kinds;
        for (const auto& o : a[i].scene.objects) kinds.insert({o.color, o.shape});
        CHECK(kinds.size() == a[i].scene.objects.size());
    }
    CHECK_THROWS_AS(gen_episodes(42, 0, cfg, opts), ConfigError);
}

TEST_CASE("forget fraction controls the forget-slice size") {
    const PolicyConfig cfg = default_cfg();
    CorpusOptions opts;
    opts.count = 512;
    auto eps = gen_episodes(42, 512, cfg, opts);
    int red = 0;
    for (const auto& e : eps)
        if (e.instruction.target_color == cfg.color_index("red")) ++red;
    CHECK(red == 154);  // round(0.3 * 512)
}

TEST_CASE("build_splits: hand case and partition contract") {
    const PolicyConfig cfg = default_cfg();
    GridScene layout;
    layout.n = 7;
    layout.agent = {3, 3};
    layout.objects = {SceneObject{0, 0, {1, 1}}, SceneObject{1, 0, {5, 5}}};

    SUBCASE("same-layout pair lands in the boundary set") {
        std::vector<Episode> eps;
        eps.push_back(make_episode(0, layout, 0, 0, cfg));
        eps.push_back(make_episode(1, layout, 1, 0, cfg));
        GridScene other = layout;
        other.agent = {0, 6};
        other.objects = {SceneObject{2, 1, {2, 2}}, SceneObject{3, 0, {4, 1}}};
        eps.push_back(make_episode(2, other, 2, 1, cfg));

        const DataSplits splits = build_splits(eps, UnlearnRequest{}, cfg, 1);
        REQUIRE(splits.forget.size() == 1);
        REQUIRE(splits.boundary.size() == 1);
        CHECK(splits.boundary[0].id == 1);
        REQUIRE(splits.retain.size() == 1);
        CHECK(splits.retain[0].id == 2);
        REQUIRE(splits.mismatch_pairs.size() == 1);
        CHECK(splits.mismatch_pairs[0] == std::pair<int, int>{0, 1});
    }

    SUBCASE("no forget side is an error naming the predicate") {
        std::vector<Episode> eps{make_episode(0, layout, 1, 0, cfg)};
        CHECK_THROWS_WITH_AS(build_splits(eps, UnlearnRequest{}, cfg, 1), doctest::Contains("red"),
                             ValueError);
    }

    SUBCASE("all-forget corpus is an error") {
        std::vector<Episode> eps{make_episode(0, layout, 0, 0, cfg)};
        CHECK_THROWS_AS(build_splits(eps, UnlearnRequest{}, cfg, 1), ValueError);
    }
}

TEST_CASE("split disjointness and coverage over random corpora") {
    const PolicyConfig cfg = default_cfg();
    for (std::uint64_t seed = 1; seed <= 50; ++seed) {
        CorpusOptions opts;
        opts.count = 40;
        auto eps = gen_episodes(seed, opts.count, cfg, opts);
        const DataSplits splits = build_splits(eps, UnlearnRequest{}, cfg, 1);
        std::set<int> seen;
        for (const auto& e : splits.forget) CHECK(seen.insert(e.id).second);
        for (const auto& e : splits.retain) CHECK(seen.insert(e.id).second);
        for (const auto& e : splits.boundary) CHECK(seen.insert(e.id).second);
        CHECK(seen.size() == eps.size());
        for (const auto& e : splits.boundary)
            CHECK(e.instruction.target_color != cfg.color_index("red"));
        CHECK(splits.mismatch_pairs.size() == splits.forget.size());
    }
}

TEST_CASE("similarity ranking matches a brute-force sort oracle") {
    const PolicyConfig cfg = default_cfg();
    CorpusOptions opts;
    opts.count = 64;
    auto eps = gen_episodes(77, opts.count, cfg, opts);
    const UnlearnRequest request;
    const DataSplits splits = build_splits(eps, request, cfg, 1);

    for (std::size_t fi = 0; fi < splits.forget.size(); ++fi) {
        const Episode& f = splits.forget[fi];
        std::vector<const Episode*> others;
        for (const auto& e : eps)
            if (!request.matches(e, cfg)) others.push_back(&e);
        std::stable_sort(others.begin(), others.end(), [&](const Episode* a, const Episode* b) {
            const Similarity sa = episode_similarity(f, *a);
            const Similarity sb = episode_similarity(f, *b);
            if (sa == sb) return a->id < b->id;
            return sa > sb;
        });
        CHECK(splits.mismatch_pairs[fi].first == f.id);
        CHECK(splits.mismatch_pairs[fi].second == others.front()->id);
    }
}

TEST_CASE("simulate: expert, null policy, and violations") {
    const PolicyConfig cfg = default_cfg();
    CorpusOptions opts;
    opts.count = 8;
    auto eps = gen_episodes(5, 8, cfg, opts);
    const int red = cfg.color_index("red");
    for (const auto& ep : eps) {
        const RolloutOutcome expert = simulate(ep.expert_tokens, ep.scene, ep.instruction, 64, red);
        CHECK(expert.success);
        CHECK(expert.violation == (ep.instruction.target_color == red));

        const RolloutOutcome idle = simulate({kStop}, ep.scene, ep.instruction, 64, red);
        CHECK(!idle.success);
        CHECK(!idle.violation);
        CHECK(idle.steps == 0);
    }

    GridScene scene;
    scene.n = 3;
    scene.agent = {0, 0};
    scene.objects = {SceneObject{red, 0, {0, 0}}, SceneObject{1, 0, {2, 2}}};
    Instruction blue;
    blue.target_color = 1;
    blue.target_shape = 0;
    const RolloutOutcome bad = simulate({kBos, kGrasp, kEos}, scene, blue, 16, red);
    CHECK(bad.violation);
    CHECK(!bad.success);
}

TEST_CASE("simulation clamps at walls and is side-effect free") {
    GridScene scene;
    scene.n = 3;
    scene.agent = {0, 0};
    scene.objects = {SceneObject{0, 0, {0, 1}}};
    Instruction instr;
    instr.target_color = 0;
    instr.target_shape = 0;
    const GridScene before = scene;
    const RolloutOutcome out = simulate({kBos, kUp, kLeft, kRight, kGrasp, kEos}, scene, instr, 16);
    CHECK(out.success);
    CHECK(scene.agent == before.agent);
    CHECK_THROWS_AS(simulate({kStop}, scene, instr, 0), ConfigError);
}

TEST_CASE("dataset files round-trip") {
    const PolicyConfig cfg = default_cfg();
    CorpusOptions opts;
    opts.count = 16;
    auto eps = gen_episodes(11, 16, cfg, opts);
    const DataSplits splits = build_splits(eps, UnlearnRequest{}, cfg, 1);
    const std::string dir = "world_io_test";
    std::system(("rm -rf " + dir + " && mkdir -p " + dir).c_str());
    write_dataset(dir, eps, splits, UnlearnRequest{}, cfg);
    const LoadedDataset loaded = load_dataset(dir, cfg);
    REQUIRE(loaded.episodes.size() == eps.size());
    for (std::size_t i = 0; i < eps.size(); ++i) {
        CHECK(loaded.episodes[i].expert_tokens == eps[i].expert_tokens);
        CHECK(loaded.episodes[i].split == eps[i].split);
        CHECK(loaded.episodes[i].instruction.tokens == eps[i].instruction.tokens);
    }
    CHECK(loaded.splits.forget.size() == splits.forget.size());
    CHECK(loaded.splits.mismatch_pairs == splits.mismatch_pairs);
}

TEST_SUITE_END();
