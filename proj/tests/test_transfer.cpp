#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "drvessel/preprocess.hpp"
#include "drvessel/transfer.hpp"
#include "test_util.hpp"

#include "oracles.hpp"

using namespace drvessel;

namespace {

ImageLatent point(const std::string& id, std::vector<double> z, Domain d = Domain::source)
{
    ImageLatent l;
    l.sample_id = id;
    l.domain = d;
    l.z.values = std::move(z);
    l.patch_z = {l.z};
    return l;
}

std::vector<double> gaussian(Rng& rng, std::size_t dim, double centre, double sd = 1.0)
{
    std::vector<double> v(dim);
    for (double& x : v) x = centre + sd * rng.normal();
    return v;
}

SampleRecord record(const std::string& id, Domain d, GrayImage img, std::optional<MaskImage> mask = std::nullopt,
                    std::optional<PictureLabel> label = std::nullopt)
{
    SampleRecord r;
    r.id = id;
    r.domain = d;
    r.dataset_name = d == Domain::target ? "t" : "s";
    r.image = std::move(img);
    r.mask = std::move(mask);
    r.picture_label = label;
    return r;
}

SampleRecord synth_record(const std::string& id, Domain d, std::uint64_t seed, VesselStyle style, int size = 32,
                          std::optional<PictureLabel> label = std::nullopt)
{
    const auto s = synth_vessels(seed, size, size, style);
    return record(id, d, preprocess_rgb(s.image, {}), s.mask, label);
}

} // namespace

// --- latents ---------------------------------------------------------------

TEST(ImageLatent, SinglePatchGridEqualsPatchLatent)
{
    Rng rng(1);
    const auto m = build({2, 4, 8, 16, 1});
    GrayImage img(16, 16);
    for (double& v : img.pixels) v = rng.uniform();
    const auto l = image_latent(m, img, plan_grid(16, 16, 16, 16), "a");
    EXPECT_EQ(l.z.values, extract_latent(m, img).values);
    ASSERT_EQ(l.patch_z.size(), 1u);
}

TEST(ImageLatent, IdenticalHalvesAndBruteForceLoop)
{
    Rng rng(2);
    const auto m = build({2, 4, 8, 16, 1});
    GrayImage half(16, 16);
    for (double& v : half.pixels) v = rng.uniform();
    GrayImage img(32, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) img.at(x, y) = img.at(x + 16, y) = half.at(x, y);
    const auto l = image_latent(m, img, plan_grid(32, 16, 16, 16));
    const auto h = extract_latent(m, half).values;
    for (std::size_t j = 0; j < h.size(); ++j) EXPECT_NEAR(l.z.values[j], h[j], 1e-15);

    GrayImage rnd(40, 28);
    for (double& v : rnd.pixels) v = rng.uniform();
    const auto grid = plan_grid(40, 28, 16, 8);
    const auto got = image_latent(m, rnd, grid);
    std::vector<double> sum(8, 0.0);
    for (const auto& o : grid.origins) {
        const auto z = extract_latent(m, crop(rnd, o, 16)).values;
        for (std::size_t j = 0; j < 8; ++j) sum[j] += z[j];
    }
    ASSERT_EQ(got.patch_z.size(), grid.origins.size());
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(got.z.values[j], sum[j] / grid.origins.size(), 1e-12);
}

// --- clustering ------------------------------------------------------------

TEST(SeededKMeans, SeparableClouds)
{
    Rng rng(3);
    std::vector<ImageLatent> pts;
    for (int i = 0; i < 10; ++i) pts.push_back(point("a" + std::to_string(i), gaussian(rng, 3, 0.0, 0.3)));
    for (int i = 0; i < 10; ++i) pts.push_back(point("b" + std::to_string(i), gaussian(rng, 3, 10.0, 0.3)));
    const auto c = seeded_kmeans(pts, {{"a3", 0}, {"b7", 1}}, {2, 100, 1e-9, 0});
    for (const auto& p : pts) EXPECT_EQ(c.assignments.at(p.sample_id), p.sample_id[0] == 'a' ? 0 : 1) << p.sample_id;
}

TEST(SeededKMeans, IdenticalPointsConvergeImmediately)
{
    std::vector<ImageLatent> pts;
    for (int i = 0; i < 6; ++i) pts.push_back(point("p" + std::to_string(i), {1.5, -2.0}));
    const auto c = seeded_kmeans(pts, {}, {3, 100, 1e-6, 0});
    EXPECT_EQ(c.iterations, 1);
    EXPECT_EQ(c.objective, 0.0);
}

TEST(SeededKMeans, MatchesExhaustivePinRespectingSearch)
{
    for (std::uint64_t trial = 0; trial < 25; ++trial) {
        Rng rng(100 + trial);
        std::vector<ImageLatent> pts;
        for (int i = 0; i < 5; ++i) pts.push_back(point("a" + std::to_string(i), gaussian(rng, 2, 0.0)));
        for (int i = 0; i < 5; ++i) pts.push_back(point("b" + std::to_string(i), gaussian(rng, 2, 4.0)));
        const std::map<std::string, int> seeds{{"a0", 0}, {"b0", 1}};
        const auto c = seeded_kmeans(pts, seeds, {2, 100, 0.0, trial});

        double best = std::numeric_limits<double>::infinity();
        for (int mask = 0; mask < 256; ++mask) {
            std::vector<int> assign(10);
            assign[0] = 0;
            assign[5] = 1;
            int bit = 0;
            for (int i = 0; i < 10; ++i)
                if (i != 0 && i != 5) assign[i] = (mask >> bit++) & 1;
            best = std::min(best, oracle::assignment_objective(pts, assign, 2));
        }
        EXPECT_NEAR(c.objective, best, 1e-12 * std::max(1.0, best)) << "trial " << trial;
    }
}

TEST(SeededKMeans, ObjectiveMonotoneAndSeedsPinned)
{
    for (std::uint64_t run = 0; run < 100; ++run) {
        Rng rng(Rng::derive(7, run));
        const int n = 8 + static_cast<int>(rng.below(30));
        const int k = 2 + static_cast<int>(rng.below(4));
        const std::size_t dim = 1 + rng.below(6);
        std::vector<ImageLatent> pts;
        for (int i = 0; i < n; ++i) pts.push_back(point("p" + std::to_string(i), gaussian(rng, dim, rng.uniform(-3, 3))));
        std::map<std::string, int> seeds;
        for (int i = 0; i < n; ++i)
            if (rng.uniform() < 0.25) seeds["p" + std::to_string(i)] = static_cast<int>(rng.below(k));
        const auto c = seeded_kmeans(pts, seeds, {k, 100, 1e-9, run});
        for (std::size_t t = 1; t < c.objective_history.size(); ++t)
            EXPECT_LE(c.objective_history[t], c.objective_history[t - 1]) << "run " << run << " iter " << t;
        for (const auto& [id, label] : seeds) EXPECT_EQ(c.assignments.at(id), label) << "run " << run;
        EXPECT_NEAR(clustering_objective(c, pts), c.objective, 1e-9 * std::max(1.0, c.objective));
    }
}

TEST(SeededKMeans, Errors)
{
    std::vector<ImageLatent> pts{point("a", {0}), point("b", {1})};
    EXPECT_THROW(seeded_kmeans(pts, {}, {3, 10, 1e-6, 0}), ConfigError);
    EXPECT_THROW(seeded_kmeans(pts, {}, {1, 10, 1e-6, 0}), ConfigError);
    EXPECT_THROW(seeded_kmeans(pts, {{"zz", 0}}, {2, 10, 1e-6, 0}), ConfigError);
    EXPECT_THROW(seeded_kmeans(pts, {{"a", 2}}, {2, 10, 1e-6, 0}), ConfigError);
    pts.push_back(point("a", {2}));
    EXPECT_THROW(seeded_kmeans(pts, {}, {2, 10, 1e-6, 0}), ConfigError);
}

TEST(SeedsFromLabels, DomainAndPictureLabels)
{
    const std::vector<ImageLatent> pts{point("t", {0}, Domain::target), point("s1", {0}), point("s2", {0}),
                                       point("s3", {0})};
    const auto seeds = seeds_from_labels(pts, {{"s1", PictureLabel::similar}, {"s2", PictureLabel::dissimilar}});
    const std::map<std::string, int> want{{"t", 0}, {"s1", 0}, {"s2", 1}};
    EXPECT_EQ(seeds, want);
}

// --- voting ----------------------------------------------------------------

namespace {

ClusterModel two_cluster_model()
{
    ClusterModel c;
    c.k = 2;
    c.centroids = {LatentVector{{0.0}}, LatentVector{{10.0}}};
    c.seeds = {{"t", 0}, {"d", 1}};
    c.assignments = {{"t", 0}, {"d", 1}, {"s1", 0}, {"s2", 1}, {"s3", 0}};
    return c;
}

ImageLatent with_patches(const std::string& id, std::vector<double> patches, Domain d = Domain::source)
{
    ImageLatent l;
    l.sample_id = id;
    l.domain = d;
    double s = 0.0;
    for (double p : patches) {
        l.patch_z.push_back(LatentVector{{p}});
        s += p;
    }
    l.z.values = {s / static_cast<double>(patches.size())};
    return l;
}

} // namespace

TEST(VoteSelect, HandCountedFractions)
{
    const std::vector<ImageLatent> lat{with_patches("t", {0.0}, Domain::target), with_patches("d", {10.0}),
                                       with_patches("s1", {1, 9, 2, 8, 0.5}), with_patches("s2", {9, 11, 6, 12}),
                                       with_patches("s3", {4.9, 5.1, 3})};
    const auto r = vote_select(two_cluster_model(), lat, {{"d", PictureLabel::dissimilar}}, 0.5);
    EXPECT_EQ(r.friendly_clusters, (std::vector<bool>{true, false}));
    EXPECT_DOUBLE_EQ(r.record("s1").vote_fraction, 3.0 / 5.0);
    EXPECT_DOUBLE_EQ(r.record("s2").vote_fraction, 0.0);
    EXPECT_DOUBLE_EQ(r.record("s3").vote_fraction, 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(r.record("d").vote_fraction, 0.0);
    EXPECT_EQ(r.ranking, (std::vector<std::string>{"s3", "s1", "s2", "d"}));
    EXPECT_EQ(r.accepted_ids(), (std::vector<std::string>{"s3", "s1"}));
    EXPECT_EQ(r.nearest_source, "s1");
    for (const auto& v : r.records) {
        EXPECT_GE(v.vote_fraction, 0.0);
        EXPECT_LE(v.vote_fraction, 1.0);
        EXPECT_EQ(v.accepted, accepts(v.vote_fraction, 0.5));
    }
}

TEST(VoteSelect, NoFriendlyClusterAcceptsNothing)
{
    auto c = two_cluster_model();
    c.seeds = {{"d", 1}};
    const std::vector<ImageLatent> lat{with_patches("t", {0.0}, Domain::target), with_patches("d", {10.0}),
                                       with_patches("s1", {0, 0, 0})};
    const auto r = vote_select(c, lat, {{"d", PictureLabel::dissimilar}}, 1e-9);
    EXPECT_EQ(r.friendly_clusters, (std::vector<bool>{false, false}));
    EXPECT_TRUE(r.accepted_ids().empty());
}

TEST(VoteSelect, Errors)
{
    auto c = two_cluster_model();
    c.seeds.clear();
    const std::vector<ImageLatent> lat{with_patches("t", {0.0}, Domain::target), with_patches("s1", {0.0})};
    EXPECT_THROW(vote_select(c, lat, {}, 0.5), SelectionError);
    EXPECT_THROW(vote_select(two_cluster_model(), lat, {}, 1.5), ConfigError);
    const std::vector<ImageLatent> no_target{with_patches("d", {10.0}), with_patches("s1", {0.0})};
    EXPECT_THROW(vote_select(two_cluster_model(), no_target, {{"d", PictureLabel::dissimilar}}, 0.5), SelectionError);
}

TEST(SelectTransfer, IdenticalSourceGetsFullVote)
{
    const auto t = synth_record("t0", Domain::target, 1, VesselStyle::retina, 32);
    auto copy = t;
    copy.id = "copy";
    copy.domain = Domain::source;
    copy.mask.reset();
    const auto hostile = synth_record("n0", Domain::source, 2, VesselStyle::neuron, 32, PictureLabel::dissimilar);
    LoopConfig cfg;
    cfg.stride = 16;
    cfg.kmeans.k = 2;
    const auto model = build({2, 4, 8, 32, 5});
    const auto r = select_transfer(model, {t}, {copy, hostile}, cfg);
    EXPECT_EQ(r.record("copy").vote_fraction, 1.0);
    EXPECT_TRUE(r.record("copy").accepted);
    EXPECT_EQ(r.record("copy").mean_distance_to_target, 0.0);
    EXPECT_EQ(r.nearest_source, "copy");
}

TEST(NearestSource, OneDimensionalExample)
{
    const std::vector<ImageLatent> targets{point("t1", {-1.0}, Domain::target), point("t2", {1.0}, Domain::target)};
    const std::vector<ImageLatent> sources{point("a", {-2.0}), point("b", {1.0}), point("c", {3.0})};
    EXPECT_EQ(nearest_source(targets, sources), 1u);
    const std::vector<ImageLatent> tied{point("z", {1.0}), point("y", {-1.0})};
    EXPECT_EQ(nearest_source(targets, tied), 1u);
    EXPECT_THROW(nearest_source({}, sources), ConfigError);
}

TEST(NearestSource, MatchesExhaustiveScan)
{
    for (std::uint64_t trial = 0; trial < 20; ++trial) {
        Rng rng(trial);
        std::vector<ImageLatent> targets, sources;
        for (int i = 0; i < 5; ++i) targets.push_back(point("t" + std::to_string(i), gaussian(rng, 8, 0.0), Domain::target));
        for (int i = 0; i < 50; ++i) sources.push_back(point("s" + std::to_string(i), gaussian(rng, 8, 0.5)));
        std::vector<double> centre(8, 0.0);
        for (const auto& t : targets)
            for (int j = 0; j < 8; ++j) centre[j] += t.z.values[j] / 5.0;
        double best = std::numeric_limits<double>::infinity();
        for (const auto& s : sources) {
            double d = 0.0;
            for (int j = 0; j < 8; ++j) d += (s.z.values[j] - centre[j]) * (s.z.values[j] - centre[j]);
            best = std::min(best, d);
        }
        const auto& got = sources[nearest_source(targets, sources)];
        double d = 0.0;
        for (int j = 0; j < 8; ++j) d += (got.z.values[j] - centre[j]) * (got.z.values[j] - centre[j]);
        EXPECT_NEAR(d, best, 1e-12);
    }
}

// --- report ----------------------------------------------------------------

TEST(SelectionReport, RoundTripsRows)
{
    const std::vector<ImageLatent> lat{with_patches("t", {0.0}, Domain::target), with_patches("d", {10.0}),
                                       with_patches("s1", {1, 9, 2, 8, 0.5})};
    const auto r = vote_select(two_cluster_model(), lat, {{"d", PictureLabel::dissimilar}}, 0.5);
    std::stringstream ss;
    write_selection(ss, r, 3);
    EXPECT_EQ(ss.str().rfind("# selection round=3 threshold=0.5000 sources=2 accepted=1 nearest=s1\n", 0), 0u);
    const auto rows = read_selection(ss);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].sample_id, "s1");
    EXPECT_DOUBLE_EQ(rows[0].vote_fraction, 0.6);
    EXPECT_TRUE(rows[0].accepted);
    EXPECT_FALSE(rows[1].accepted);
}

// --- mutual information ----------------------------------------------------

TEST(BinnedMi, IdentityEqualsEntropyAndSymmetry)
{
    Rng rng(9);
    std::vector<double> x(2000), y(2000);
    for (auto& v : x) v = rng.normal();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * x[i] + 0.3 * rng.normal();
    EXPECT_NEAR(binned_mi(x, x, 8), binned_entropy(x, 8), 1e-12);
    EXPECT_NEAR(binned_mi(x, y, 8), binned_mi(y, x, 8), 1e-12);
    EXPECT_GE(binned_mi(x, y, 8), 0.0);
}

TEST(BinnedMi, IndependentSamplesNearZero)
{
    Rng rng(10);
    std::vector<double> x(10000), y(10000);
    for (auto& v : x) v = rng.uniform();
    for (auto& v : y) v = rng.uniform();
    EXPECT_LT(binned_mi(x, y, 8), 0.05);
}

TEST(BinnedMi, PerfectBinaryCorrelationIsOneBit)
{
    const std::vector<double> x{0, 1, 0, 1, 0, 1, 0, 1}, y = x;
    EXPECT_NEAR(binned_mi(x, y, 2), 1.0, 1e-12);
    EXPECT_NEAR(binned_entropy(x, 2), 1.0, 1e-12);
}

TEST(IbReport, DegenerateCases)
{
    Rng rng(11);
    std::vector<LatentVector> z(500);
    std::vector<double> in(500), lab(500);
    for (std::size_t i = 0; i < z.size(); ++i) {
        in[i] = rng.uniform();
        lab[i] = in[i] + 0.1 * rng.normal();
        z[i].values = {in[i], rng.uniform()};
    }
    const auto r0 = ib_report(z, in, lab, 0.0, 8);
    EXPECT_DOUBLE_EQ(r0.lagrangian, r0.I_xz);
    for (auto& v : z) v.values = {0.25, 0.25};
    const auto rc = ib_report(z, in, lab, 2.0, 8);
    EXPECT_EQ(rc.I_xz, 0.0);
    EXPECT_EQ(rc.I_zy, 0.0);
    EXPECT_NEAR(rc.lagrangian, 2.0 * rc.H_y, 1e-12);
    EXPECT_THROW(ib_report(z, in, lab, -1.0, 8), ConfigError);
}

// --- loop ------------------------------------------------------------------

TEST(TwoStageLoop, SingleRoundEqualsPlainTraining)
{
    const std::vector<SampleRecord> target{synth_record("t0", Domain::target, 1, VesselStyle::retina),
                                           synth_record("t1", Domain::target, 2, VesselStyle::retina)};
    const NetworkSpec spec{2, 4, 8, 16, 3};
    TrainConfig tc;
    tc.epochs = 2;
    tc.patches_per_image = 4;
    tc.seed = 12;
    LoopConfig lc;
    lc.rounds = 1;
    lc.stride = 16;
    const auto loop = two_stage_loop(target, {}, spec, tc, lc);
    const auto plain = train(build(spec), training_patches(target, 16, 4, 12), tc);
    EXPECT_TRUE(same_weights(loop.model, plain.model));
    EXPECT_EQ(loop.loss_histories.front(), plain.loss_history);
}

TEST(TwoStageLoop, EmptyPoolLeavesTrainingUnaffected)
{
    const std::vector<SampleRecord> target{synth_record("t0", Domain::target, 1, VesselStyle::retina)};
    const NetworkSpec spec{2, 4, 8, 16, 3};
    TrainConfig tc;
    tc.epochs = 2;
    tc.patches_per_image = 4;
    tc.seed = 5;
    LoopConfig lc;
    lc.rounds = 2;
    lc.stride = 16;
    const auto loop = two_stage_loop(target, {}, spec, tc, lc);
    ASSERT_EQ(loop.selections.size(), 2u);
    for (const auto& s : loop.selections) EXPECT_TRUE(s.records.empty());

    auto first = train(build(spec), training_patches(target, 16, 4, 5), tc);
    TrainConfig second = tc;
    second.seed = Rng::derive(5, 1);
    second.adam = first.adam;
    const auto both = train(std::move(first.model), training_patches(target, 16, 4, second.seed), second);
    EXPECT_TRUE(same_weights(loop.model, both.model));
}

TEST(TwoStageLoop, UnmaskedAcceptancesReportedSeparately)
{
    const std::vector<SampleRecord> target{synth_record("t0", Domain::target, 1, VesselStyle::retina)};
    auto copy = target.front();
    copy.id = "copy";
    copy.domain = Domain::source;
    copy.mask.reset();
    const auto hostile = synth_record("n0", Domain::source, 2, VesselStyle::neuron, 32, PictureLabel::dissimilar);
    TrainConfig tc;
    tc.epochs = 1;
    tc.patches_per_image = 2;
    LoopConfig lc;
    lc.rounds = 1;
    lc.stride = 16;
    lc.kmeans.k = 2;
    const auto res = two_stage_loop(target, {copy, hostile}, {2, 4, 8, 32, 3}, tc, lc);
    EXPECT_EQ(res.accepted_unmasked, (std::vector<std::string>{"copy"}));
}
