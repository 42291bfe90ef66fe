#pragma once

// Transfer-instance selection in the learned latent space: image latents,
// constrained (seed-pinned) K-Means, patch voting, nearest-source lookup, the
// alternating train/select loop, and a binned mutual-information report.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "drvessel/drunet.hpp"
#include "drvessel/error.hpp"
#include "drvessel/imgio.hpp"
#include "drvessel/patchwork.hpp"
#include "drvessel/rng.hpp"

namespace drvessel {

struct ImageLatent {
    std::string sample_id;
    Domain domain = Domain::target;
    LatentVector z;                    ///< mean of patch_z
    std::vector<LatentVector> patch_z; ///< one per grid patch, grid order
};

inline double squared_distance(const LatentVector& a, const LatentVector& b)
{
    if (a.values.size() != b.values.size()) throw ShapeError("latent dimensions differ");
    double s = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        const double d = a.values[i] - b.values[i];
        s += d * d;
    }
    return s;
}

inline LatentVector mean_latent(const std::vector<LatentVector>& zs)
{
    if (zs.empty()) throw ShapeError("mean_latent: no vectors");
    LatentVector m{std::vector<double>(zs.front().values.size(), 0.0)};
    for (const auto& z : zs)
        for (std::size_t i = 0; i < m.values.size(); ++i) m.values[i] += z.values[i];
    for (double& v : m.values) v /= static_cast<double>(zs.size());
    return m;
}

inline ImageLatent image_latent(const Model& model, const GrayImage& img, const PatchGrid& grid,
                                std::string id = {}, Domain domain = Domain::target)
{
    if (grid.origins.empty()) throw ConfigError("image_latent: empty grid");
    const auto set = extract(img, grid);
    ImageLatent out{std::move(id), domain, {}, {}};
    out.patch_z.reserve(set.patches.size());
    for (const auto& p : set.patches) out.patch_z.push_back(extract_latent(model, p));
    out.z = mean_latent(out.patch_z);
    return out;
}

inline ImageLatent image_latent(const Model& model, const SampleRecord& r, int stride)
{
    return image_latent(model, r.image, plan_grid(r.image.width, r.image.height, model.spec.patch, stride), r.id,
                        r.domain);
}

// ---------------------------------------------------------------------------
// Constrained K-Means

struct KMeansOptions {
    int k = 4;
    int max_iter = 100;
    double tol = 1e-6;
    std::uint64_t seed = 0;
};

struct ClusterModel {
    int k = 0;
    std::vector<LatentVector> centroids;
    std::map<std::string, int> assignments;
    std::map<std::string, int> seeds;
    double objective = 0.0;
    std::vector<double> objective_history; ///< one entry per iteration
    int iterations = 0;
};

/// Sum of squared distances of every latent to its assigned centroid.
inline double clustering_objective(const ClusterModel& c, const std::vector<ImageLatent>& latents)
{
    double s = 0.0;
    for (const auto& l : latents) s += squared_distance(l.z, c.centroids.at(c.assignments.at(l.sample_id)));
    return s;
}

inline int nearest_centroid(const std::vector<LatentVector>& centroids, const LatentVector& z)
{
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < centroids.size(); ++j) {
        const double d = squared_distance(z, centroids[j]);
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(j);
        }
    }
    return best;
}

/// Seeded K-Means with seeded samples pinned to their seed clusters.
///
/// Centroids start at the mean of each label's seeds; labels without seeds
/// take the unseeded point farthest from the centroids chosen so far (a
/// random point when there are none). Lloyd iterations keep pinned samples
/// fixed; the objective never increases.
inline ClusterModel seeded_kmeans(const std::vector<ImageLatent>& latents, const std::map<std::string, int>& seeds,
                                  const KMeansOptions& opts = {})
{
    const int k = opts.k;
    const auto n = latents.size();
    if (latents.empty()) throw ConfigError("seeded_kmeans: no latents");
    if (k < 2) throw ConfigError("seeded_kmeans: k must be at least 2");
    if (static_cast<std::size_t>(k) > n)
        throw ConfigError("seeded_kmeans: k = " + std::to_string(k) + " exceeds " + std::to_string(n) + " latents");
    std::set<std::string> ids;
    for (const auto& l : latents)
        if (!ids.insert(l.sample_id).second) throw ConfigError("seeded_kmeans: duplicate sample id '" + l.sample_id + "'");

    std::vector<int> pinned(n, -1);
    for (const auto& [id, label] : seeds) {
        if (label < 0 || label >= k) throw ConfigError("seeded_kmeans: seed label out of range for '" + id + "'");
        const auto it = std::find_if(latents.begin(), latents.end(), [&](const auto& l) { return l.sample_id == id; });
        if (it == latents.end()) throw ConfigError("seeded_kmeans: seed '" + id + "' is not among the latents");
        pinned[static_cast<std::size_t>(it - latents.begin())] = label;
    }

    ClusterModel c;
    c.k = k;
    c.seeds = seeds;
    c.centroids.assign(k, {});
    std::vector<bool> has(k, false);
    for (int j = 0; j < k; ++j) {
        std::vector<LatentVector> members;
        for (std::size_t i = 0; i < n; ++i)
            if (pinned[i] == j) members.push_back(latents[i].z);
        if (!members.empty()) {
            c.centroids[j] = mean_latent(members);
            has[j] = true;
        }
    }
    Rng rng(Rng::derive(opts.seed, 0xc1));
    std::vector<bool> used(n, false);
    for (int j = 0; j < k; ++j) {
        if (has[j]) continue;
        std::vector<std::size_t> cand;
        for (std::size_t i = 0; i < n; ++i)
            if (pinned[i] < 0 && !used[i]) cand.push_back(i);
        if (cand.empty())
            for (std::size_t i = 0; i < n; ++i)
                if (!used[i]) cand.push_back(i);
        if (cand.empty())
            for (std::size_t i = 0; i < n; ++i) cand.push_back(i);
        std::size_t pick = cand.front();
        if (std::none_of(has.begin(), has.end(), [](bool b) { return b; })) {
            pick = cand[rng.below(cand.size())];
        } else {
            double far = -1.0;
            for (auto i : cand) {
                double dmin = std::numeric_limits<double>::infinity();
                for (int q = 0; q < k; ++q)
                    if (has[q]) dmin = std::min(dmin, squared_distance(latents[i].z, c.centroids[q]));
                if (dmin > far) {
                    far = dmin;
                    pick = i;
                }
            }
        }
        used[pick] = true;
        c.centroids[j] = latents[pick].z;
        has[j] = true;
    }

    std::vector<int> assign(n, 0);
    for (int it = 0; it < std::max(1, opts.max_iter); ++it) {
        for (std::size_t i = 0; i < n; ++i) assign[i] = pinned[i] >= 0 ? pinned[i] : nearest_centroid(c.centroids, latents[i].z);

        double shift = 0.0;
        for (int j = 0; j < k; ++j) {
            std::vector<LatentVector> members;
            for (std::size_t i = 0; i < n; ++i)
                if (assign[i] == j) members.push_back(latents[i].z);
            if (members.empty()) continue; // keeps its previous centroid
            auto updated = mean_latent(members);
            shift = std::max(shift, std::sqrt(squared_distance(updated, c.centroids[j])));
            c.centroids[j] = std::move(updated);
        }
        double obj = 0.0;
        for (std::size_t i = 0; i < n; ++i) obj += squared_distance(latents[i].z, c.centroids[assign[i]]);
        c.objective_history.push_back(obj);
        c.iterations = it + 1;
        if (shift < opts.tol) break;
    }
    for (std::size_t i = 0; i < n; ++i) c.assignments[latents[i].sample_id] = assign[i];
    c.objective = c.objective_history.back();
    return c;
}

/// Seed clusters from domain and picture labels: target images and `similar`
/// sources pin to cluster 0, `dissimilar` sources to cluster 1.
inline std::map<std::string, int> seeds_from_labels(const std::vector<ImageLatent>& latents,
                                                    const std::map<std::string, PictureLabel>& labels)
{
    std::map<std::string, int> seeds;
    for (const auto& l : latents) {
        if (l.domain == Domain::target) {
            seeds[l.sample_id] = 0;
            continue;
        }
        const auto it = labels.find(l.sample_id);
        if (it != labels.end()) seeds[l.sample_id] = it->second == PictureLabel::similar ? 0 : 1;
    }
    return seeds;
}

// ---------------------------------------------------------------------------
// Voting

struct SourceVote {
    std::string sample_id;
    double vote_fraction = 0.0;
    double mean_distance_to_target = 0.0;
    bool accepted = false;
};

struct SelectionResult {
    std::vector<SourceVote> records; ///< in input order
    std::vector<std::string> ranking;
    std::vector<bool> friendly_clusters;
    double threshold = 0.5;
    std::string nearest_source; ///< empty when there are no sources

    const SourceVote& record(const std::string& id) const
    {
        for (const auto& r : records)
            if (r.sample_id == id) return r;
        throw ConfigError("selection has no source '" + id + "'");
    }
    std::vector<std::string> accepted_ids() const
    {
        std::vector<std::string> out;
        for (const auto& id : ranking)
            if (record(id).accepted) out.push_back(id);
        return out;
    }
};

inline bool accepts(double vote_fraction, double threshold) { return vote_fraction >= threshold; }

/// Index of the source whose latent is closest to the mean target latent;
/// ties go to the lexicographically smallest sample id.
inline std::size_t nearest_source(const std::vector<ImageLatent>& targets, const std::vector<ImageLatent>& sources)
{
    if (targets.empty() || sources.empty()) throw ConfigError("nearest_source: empty input");
    std::vector<LatentVector> tz;
    for (const auto& t : targets) tz.push_back(t.z);
    const auto centre = mean_latent(tz);
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < sources.size(); ++i) {
        const double d = squared_distance(centre, sources[i].z);
        if (d < best_d || (d == best_d && sources[i].sample_id < sources[best].sample_id)) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

/// A cluster is target-friendly when a strict majority of its seeded members
/// are target images or `similar` sources. Each source image votes with its
/// patches: vote_fraction is the share of its patch latents whose nearest
/// centroid is friendly.
inline SelectionResult vote_select(const ClusterModel& clusters, const std::vector<ImageLatent>& latents,
                                   const std::map<std::string, PictureLabel>& labels, double threshold = 0.5)
{
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("vote_select: threshold must lie in [0,1]");
    SelectionResult res;
    res.threshold = threshold;

    std::vector<int> pro(clusters.k, 0), con(clusters.k, 0);
    for (const auto& [id, label] : clusters.seeds) {
        const auto it = std::find_if(latents.begin(), latents.end(), [&](const auto& l) { return l.sample_id == id; });
        if (it == latents.end()) continue;
        const int cl = clusters.assignments.at(id);
        const auto lab = labels.find(id);
        const bool friendly = it->domain == Domain::target || (lab != labels.end() && lab->second == PictureLabel::similar);
        (friendly ? pro : con)[cl] += 1;
    }
    if (std::all_of(pro.begin(), pro.end(), [](int v) { return v == 0; }) &&
        std::all_of(con.begin(), con.end(), [](int v) { return v == 0; }))
        throw SelectionError("vote_select: no cluster has seeded members; add picture-level labels (similar/dissimilar) "
                             "or target images to the manifest");
    for (int j = 0; j < clusters.k; ++j) res.friendly_clusters.push_back(pro[j] > con[j]);

    std::vector<ImageLatent> targets, sources;
    for (const auto& l : latents) (l.domain == Domain::target ? targets : sources).push_back(l);
    if (sources.empty()) return res;
    if (targets.empty()) throw SelectionError("vote_select: distances need at least one target image");

    std::vector<LatentVector> tz;
    for (const auto& t : targets) tz.push_back(t.z);
    const auto centre = mean_latent(tz);
    for (const auto& s : sources) {
        if (s.patch_z.empty()) throw ConfigError("vote_select: source '" + s.sample_id + "' has no patch latents");
        int votes = 0;
        for (const auto& pz : s.patch_z)
            if (res.friendly_clusters[nearest_centroid(clusters.centroids, pz)]) ++votes;
        SourceVote v;
        v.sample_id = s.sample_id;
        v.vote_fraction = static_cast<double>(votes) / static_cast<double>(s.patch_z.size());
        v.mean_distance_to_target = std::sqrt(squared_distance(centre, s.z));
        v.accepted = accepts(v.vote_fraction, threshold);
        res.records.push_back(v);
    }
    std::vector<const SourceVote*> order;
    for (const auto& r : res.records) order.push_back(&r);
    std::sort(order.begin(), order.end(), [](const SourceVote* a, const SourceVote* b) {
        if (a->vote_fraction != b->vote_fraction) return a->vote_fraction > b->vote_fraction;
        if (a->mean_distance_to_target != b->mean_distance_to_target)
            return a->mean_distance_to_target < b->mean_distance_to_target;
        return a->sample_id < b->sample_id;
    });
    for (const auto* r : order) res.ranking.push_back(r->sample_id);
    res.nearest_source = sources[nearest_source(targets, sources)].sample_id;
    return res;
}

// ---------------------------------------------------------------------------
// Selection report (TSV)

inline void write_selection(std::ostream& out, const SelectionResult& r, int round = 1)
{
    int accepted = 0;
    for (const auto& v : r.records) accepted += v.accepted;
    out << "# selection round=" << round << " threshold=" << std::fixed << std::setprecision(4) << r.threshold
        << " sources=" << r.records.size() << " accepted=" << accepted
        << " nearest=" << (r.nearest_source.empty() ? "-" : r.nearest_source) << '\n';
    out << "sample_id\tvote_fraction\tdistance\taccepted\n";
    out << std::setprecision(6);
    for (const auto& id : r.ranking) {
        const auto& v = r.record(id);
        out << v.sample_id << '\t' << v.vote_fraction << '\t' << v.mean_distance_to_target << '\t'
            << (v.accepted ? 1 : 0) << '\n';
    }
    out.unsetf(std::ios::floatfield);
}

/// Parses the rows of a selection report (summary lines are skipped).
inline std::vector<SourceVote> read_selection(std::istream& in)
{
    std::vector<SourceVote> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#' || line.rfind("sample_id\t", 0) == 0) continue;
        std::istringstream ss(line);
        SourceVote v;
        std::string vote, dist, acc;
        if (!std::getline(ss, v.sample_id, '\t') || !std::getline(ss, vote, '\t') || !std::getline(ss, dist, '\t') ||
            !std::getline(ss, acc))
            throw FormatError("selection report: malformed row '" + line + "'");
        v.vote_fraction = std::stod(vote);
        v.mean_distance_to_target = std::stod(dist);
        v.accepted = acc == "1";
        rows.push_back(v);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Alternating feature learning and transfer

struct LoopConfig {
    int rounds = 2;
    KMeansOptions kmeans;
    double threshold = 0.5;
    int stride = 24;
};

struct LoopResult {
    Model model;
    std::vector<SelectionResult> selections; ///< one per round
    std::vector<std::vector<double>> loss_histories;
    std::vector<std::string> accepted_unmasked; ///< accepted but excluded from training, last round
};

inline std::map<std::string, PictureLabel> picture_labels(const std::vector<SampleRecord>& records)
{
    std::map<std::string, PictureLabel> out;
    for (const auto& r : records)
        if (r.picture_label) out[r.id] = *r.picture_label;
    return out;
}

/// Latents, clustering and voting for one model over a target set and a
/// source pool. An empty pool yields an empty selection.
inline SelectionResult select_transfer(const Model& model, const std::vector<SampleRecord>& target,
                                       const std::vector<SampleRecord>& sources, const LoopConfig& cfg)
{
    SelectionResult empty;
    empty.threshold = cfg.threshold;
    if (sources.empty()) return empty;
    std::vector<ImageLatent> latents;
    for (const auto& r : target) latents.push_back(image_latent(model, r, cfg.stride));
    for (const auto& r : sources) latents.push_back(image_latent(model, r, cfg.stride));
    std::map<std::string, PictureLabel> labels = picture_labels(sources);
    KMeansOptions km = cfg.kmeans;
    km.k = std::min<int>(km.k, static_cast<int>(latents.size()));
    if (km.k < 2) throw ConfigError("select_transfer: need at least two images to cluster");
    const auto clusters = seeded_kmeans(latents, seeds_from_labels(latents, labels), km);
    return vote_select(clusters, latents, labels, cfg.threshold);
}

/// Round 1 trains on the target set alone; every round ends with a
/// selection, and each later round continues training on target patches
/// plus patches of the masked sources accepted in the previous round.
inline LoopResult two_stage_loop(const std::vector<SampleRecord>& target, const std::vector<SampleRecord>& sources,
                                 const NetworkSpec& spec, const TrainConfig& train_cfg, const LoopConfig& cfg)
{
    if (cfg.rounds < 1) throw ConfigError("two_stage_loop: rounds must be at least 1");
    LoopResult res{build(spec), {}, {}, {}};
    AdamConfig adam = train_cfg.adam;
    std::vector<SampleRecord> accepted;
    for (int round = 0; round < cfg.rounds; ++round) {
        TrainConfig tc = train_cfg;
        tc.adam = adam;
        if (round > 0) tc.seed = Rng::derive(train_cfg.seed, static_cast<std::uint64_t>(round));
        auto patches = training_patches(target, spec.patch, tc.patches_per_image, tc.seed);
        if (!accepted.empty()) {
            auto extra = training_patches(accepted, spec.patch, tc.patches_per_image, Rng::derive(tc.seed, 0x50));
            for (auto& p : extra) patches.push_back(std::move(p));
        }
        auto outcome = train(std::move(res.model), patches, tc);
        res.model = std::move(outcome.model);
        adam = outcome.adam;
        res.loss_histories.push_back(std::move(outcome.loss_history));

        res.selections.push_back(select_transfer(res.model, target, sources, cfg));
        accepted.clear();
        res.accepted_unmasked.clear();
        for (const auto& id : res.selections.back().accepted_ids()) {
            const auto it = std::find_if(sources.begin(), sources.end(), [&](const auto& r) { return r.id == id; });
            if (it->mask) accepted.push_back(*it);
            else res.accepted_unmasked.push_back(id);
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Mutual information

namespace detail {

inline std::vector<int> equal_width_bins(const std::vector<double>& v, int bins)
{
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    const double min = *lo, span = *hi - *lo;
    std::vector<int> out(v.size(), 0);
    if (span > 0.0)
        for (std::size_t i = 0; i < v.size(); ++i)
            out[i] = std::min(bins - 1, static_cast<int>(std::floor((v[i] - min) / span * bins)));
    return out;
}

} // namespace detail

/// Entropy in bits of the equal-width histogram of `x`.
inline double binned_entropy(const std::vector<double>& x, int bins)
{
    if (bins < 2) throw ConfigError("binned_entropy: bins must be at least 2");
    if (x.empty()) throw ConfigError("binned_entropy: no samples");
    const auto b = detail::equal_width_bins(x, bins);
    std::vector<double> p(bins, 0.0);
    for (int v : b) p[v] += 1.0;
    double h = 0.0;
    for (double c : p)
        if (c > 0) {
            const double q = c / static_cast<double>(x.size());
            h -= q * std::log2(q);
        }
    return h;
}

/// Plug-in mutual information (bits) of equal-width histograms.
inline double binned_mi(const std::vector<double>& x, const std::vector<double>& y, int bins)
{
    if (x.size() != y.size()) throw ShapeError("binned_mi: length mismatch");
    if (bins < 2) throw ConfigError("binned_mi: bins must be at least 2");
    if (x.size() < static_cast<std::size_t>(bins)) throw ConfigError("binned_mi: fewer samples than bins");
    const auto bx = detail::equal_width_bins(x, bins), by = detail::equal_width_bins(y, bins);
    const double n = static_cast<double>(x.size());
    std::vector<double> joint(static_cast<std::size_t>(bins) * bins, 0.0), px(bins, 0.0), py(bins, 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        joint[static_cast<std::size_t>(bx[i]) * bins + by[i]] += 1.0;
        px[bx[i]] += 1.0;
        py[by[i]] += 1.0;
    }
    double mi = 0.0;
    for (int a = 0; a < bins; ++a)
        for (int b = 0; b < bins; ++b) {
            const double c = joint[static_cast<std::size_t>(a) * bins + b];
            if (c > 0) mi += (c / n) * std::log2(c * n / (px[a] * py[b]));
        }
    return std::max(0.0, mi);
}

struct IbReport {
    double I_xz = 0.0;
    double I_zy = 0.0;
    double H_y = 0.0;
    double lambda = 0.0;
    double lagrangian = 0.0;
};

/// Per-dimension MI averaged over latent dimensions. The input is summarized
/// by each patch's mean intensity, the task by its vessel fraction, and
/// I(x,y) by H(y).
inline IbReport ib_report(const std::vector<LatentVector>& latents, const std::vector<double>& input_means,
                          const std::vector<double>& vessel_fractions, double lambda, int bins)
{
    if (latents.empty()) throw ConfigError("ib_report: no latents");
    if (latents.size() != input_means.size() || latents.size() != vessel_fractions.size())
        throw ShapeError("ib_report: latents, inputs and labels must align");
    if (lambda < 0) throw ConfigError("ib_report: lambda must be nonnegative");
    const std::size_t d = latents.front().values.size();
    IbReport r;
    r.lambda = lambda;
    for (std::size_t j = 0; j < d; ++j) {
        std::vector<double> zj;
        zj.reserve(latents.size());
        for (const auto& z : latents) zj.push_back(z.values.at(j));
        r.I_xz += binned_mi(input_means, zj, bins);
        r.I_zy += binned_mi(zj, vessel_fractions, bins);
    }
    r.I_xz /= static_cast<double>(d);
    r.I_zy /= static_cast<double>(d);
    r.H_y = binned_entropy(vessel_fractions, bins);
    r.lagrangian = r.I_xz + lambda * (r.H_y - r.I_zy);
    return r;
}

/// Per-patch latents, mean intensities and vessel fractions over the
/// prediction grid of masked records.
struct IbSamples {
    std::vector<LatentVector> latents;
    std::vector<double> input_means;
    std::vector<double> vessel_fractions;
};

inline IbSamples ib_samples(const Model& model, const std::vector<SampleRecord>& records, int stride)
{
    IbSamples s;
    for (const auto& r : records) {
        if (!r.mask) continue;
        const auto grid = plan_grid(r.image.width, r.image.height, model.spec.patch, stride);
        for (const auto& o : grid.origins) {
            const auto p = crop(r.image, o, grid.patch);
            const auto m = crop(*r.mask, o, grid.patch);
            double mean = 0;
            for (double v : p.pixels) mean += v;
            s.latents.push_back(extract_latent(model, p));
            s.input_means.push_back(mean / static_cast<double>(p.size()));
            s.vessel_fractions.push_back(m.foreground_fraction());
        }
    }
    return s;
}

} // namespace drvessel
