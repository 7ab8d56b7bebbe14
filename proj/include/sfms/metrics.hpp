#pragma once

// Benchmark metrics over motion sequences: distribution distances, listener
// diversity and synchrony scores, the soft-DTW kernel used as a loss term, and
// cluster-separation diagnostics for the discretization stage. Everything here
// computes in double precision and is deterministic given its seed arguments.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sfms/mat.hpp"
#include "sfms/motion_data.hpp"

namespace sfms::metrics {

struct MetricReport {
    std::string name;
    double value = 0;
    bool degenerate = false;
    std::map<std::string, double> details;
};

// Mean per-frame Euclidean distance between two equally shaped tracks.
double l2_to_gt(const Mat<double>& gen, const Mat<double>& gt);

struct FdResult {
    double value = 0;
    bool degenerate = false;  // a covariance had eigenvalues below -1e-8
};

// Frechet distance between Gaussian fits of two sample sets (rows = samples).
// Matrix square roots go through symmetric eigendecomposition; eigenvalues in
// [-1e-8, 0) clamp to zero, anything lower flags the result degenerate.
FdResult frechet_distance(const Mat<double>& X, const Mat<double>& Y);

// Entropy (nats) of the k-means cluster-assignment histogram. Seeded k-means++
// init, fixed 50 Lloyd iterations.
double shannon_index(const Mat<double>& X, int k, std::uint64_t seed);

// Frechet distance between [gen_l | spk] and [gt_l | spk] row-wise concatenations.
FdResult paired_fd(const Mat<double>& gen_l, const Mat<double>& spk, const Mat<double>& gt_l);

struct RpccResult {
    double value = 0;
    bool degenerate = false;
};

// |PCC(gen - gt, spk)| over 1-D action signals. Zero-variance residual or
// speaker makes the score 0 and flags it.
RpccResult rpcc(const std::vector<double>& gen_action, const std::vector<double>& gt_action,
                const std::vector<double>& spk_action);

struct CccResult {
    double value = 0;
    bool degenerate = false;
};

// Concordance correlation 2*cov / (var_x + var_y + (mu_x - mu_y)^2), computed
// per channel and averaged. Two identical constant channels score 1; any other
// zero-variance channel scores 0 and flags the result.
CccResult ccc(const Mat<double>& X, const Mat<double>& Y);

struct FrDiversity {
    double frdiv = 0;  // across generations per context
    double frdvs = 0;  // across contexts per generation slot
    double frvar = 0;  // temporal variance
};

// gens[k][n] is generation k for context n, each T x d with one shared shape.
// Pairwise squared distances are normalized per entry (divided by T*d);
// temporal variance uses the 1/(T-1) estimator averaged over channels.
FrDiversity fr_diversity(const std::vector<std::vector<Mat<double>>>& gens);

struct TlccResult {
    int peak_lag = 0;
    std::vector<double> curve;  // index i holds the correlation at lag i - max_lag
};

// Pearson correlation of x[t] against y[t + lag] for every lag in
// [-max_lag, max_lag]. Ties at the peak resolve to the smallest |lag|.
TlccResult tlcc(const std::vector<double>& x, const std::vector<double>& y, int max_lag);

// Soft dynamic time warping over a squared-Euclidean cost matrix, gamma > 0.
double soft_dtw(const Mat<double>& a, const Mat<double>& b, double gamma);
double soft_dtw(const std::vector<double>& a, const std::vector<double>& b, double gamma);

struct ClusterIntegrity {
    double inter_before = 0, intra_before = 0, ratio_before = 0;
    double inter_after = 0, intra_after = 0, ratio_after = 0;
    double retention = 0;  // ratio_after / ratio_before
    bool degenerate = false;  // an intra-cluster spread collapsed to zero
};

// How well inter-cluster separation survives an encoding. `before` and `after`
// hold one flattened feature row per sequence; labels assign clusters.
ClusterIntegrity cluster_integrity(const Mat<double>& before, const Mat<double>& after,
                                   const std::vector<int>& labels);

// Scalar action signals used by the residual-correlation metric.
std::vector<double> lip_curvature(const MotionSequence& seq);
std::vector<double> head_motion(const MotionSequence& seq);

// Minimal SVG line plot; one polyline per series, shared x index.
void write_line_plot(const std::string& path, const std::string& title,
                     const std::vector<std::pair<std::string, std::vector<double>>>& series);

}  // namespace sfms::metrics
