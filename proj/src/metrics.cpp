#include "sfms/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace sfms::metrics {

namespace {

using EMat = Eigen::MatrixXd;
using EVec = Eigen::VectorXd;

constexpr double kEigClamp = -1e-8;

EVec col_mean(const Mat<double>& X) {
    EVec mu = EVec::Zero(X.cols);
    for (int r = 0; r < X.rows; ++r)
        for (int c = 0; c < X.cols; ++c) mu(c) += X(r, c);
    return mu / X.rows;
}

EMat covariance(const Mat<double>& X, const EVec& mu) {
    EMat C = EMat::Zero(X.cols, X.cols);
    for (int r = 0; r < X.rows; ++r) {
        EVec d(X.cols);
        for (int c = 0; c < X.cols; ++c) d(c) = X(r, c) - mu(c);
        C += d * d.transpose();
    }
    return C / (X.rows - 1);
}

// Symmetric PSD square root; flips `degenerate` when an eigenvalue falls below
// the clamp tolerance.
EMat sqrtm_psd(const EMat& C, bool& degenerate) {
    Eigen::SelfAdjointEigenSolver<EMat> es(C);
    EVec lam = es.eigenvalues();
    for (int i = 0; i < lam.size(); ++i) {
        if (lam(i) < kEigClamp) degenerate = true;
        lam(i) = lam(i) > 0 ? std::sqrt(lam(i)) : 0.0;
    }
    return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

double mean_of(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / v.size();
}

// Pearson correlation; returns 0 and sets `degenerate` when a side is constant.
double pearson(const std::vector<double>& x, const std::vector<double>& y, bool& degenerate) {
    double mx = mean_of(x), my = mean_of(y);
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0 || syy == 0) {
        degenerate = true;
        return 0;
    }
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace

double l2_to_gt(const Mat<double>& gen, const Mat<double>& gt) {
    if (!gen.same_shape(gt)) throw DimensionError("l2_to_gt: shape mismatch");
    if (gen.rows == 0) throw ValidationError("l2_to_gt: empty input");
    double total = 0;
    for (int r = 0; r < gen.rows; ++r) {
        double se = 0;
        for (int c = 0; c < gen.cols; ++c) {
            double d = gen(r, c) - gt(r, c);
            se += d * d;
        }
        total += std::sqrt(se);
    }
    return total / gen.rows;
}

FdResult frechet_distance(const Mat<double>& X, const Mat<double>& Y) {
    if (X.cols != Y.cols) throw DimensionError("frechet_distance: feature dims differ");
    if (X.rows < 2 || Y.rows < 2)
        throw ValidationError("frechet_distance: need at least 2 samples per side");
    EVec mu1 = col_mean(X), mu2 = col_mean(Y);
    EMat c1 = covariance(X, mu1), c2 = covariance(Y, mu2);

    FdResult out;
    EMat s1 = sqrtm_psd(c1, out.degenerate);
    EMat inner = s1 * c2 * s1;
    inner = 0.5 * (inner + inner.transpose());  // symmetrize roundoff
    EMat cross = sqrtm_psd(inner, out.degenerate);
    out.value = (mu1 - mu2).squaredNorm() + c1.trace() + c2.trace() - 2.0 * cross.trace();
    return out;
}

double shannon_index(const Mat<double>& X, int k, std::uint64_t seed) {
    int n = X.rows, D = X.cols;
    if (k < 1) throw ValidationError("shannon_index: k must be >= 1");
    if (n < k) throw ValidationError("shannon_index: fewer samples than clusters");

    auto dist2 = [&](int row, const std::vector<double>& c) {
        double s = 0;
        for (int j = 0; j < D; ++j) {
            double d = X(row, j) - c[j];
            s += d * d;
        }
        return s;
    };

    // k-means++ init: first centroid uniform, the rest proportional to the
    // squared distance from the nearest chosen centroid.
    rng::Rng r(seed);
    std::vector<std::vector<double>> cent;
    {
        int first = static_cast<int>(r.uniform_int(n));
        cent.push_back(std::vector<double>(D));
        for (int j = 0; j < D; ++j) cent[0][j] = X(first, j);
        std::vector<double> d2(n);
        while (static_cast<int>(cent.size()) < k) {
            double total = 0;
            for (int i = 0; i < n; ++i) {
                double best = dist2(i, cent[0]);
                for (std::size_t c = 1; c < cent.size(); ++c)
                    best = std::min(best, dist2(i, cent[c]));
                d2[i] = best;
                total += best;
            }
            int pick;
            if (total == 0) {
                pick = static_cast<int>(r.uniform_int(n));
            } else {
                double u = r.uniform01() * total, acc = 0;
                pick = n - 1;
                for (int i = 0; i < n; ++i) {
                    acc += d2[i];
                    if (u < acc) {
                        pick = i;
                        break;
                    }
                }
            }
            cent.push_back(std::vector<double>(D));
            for (int j = 0; j < D; ++j) cent.back()[j] = X(pick, j);
        }
    }

    std::vector<int> assign(n, 0);
    for (int it = 0; it < 50; ++it) {
        for (int i = 0; i < n; ++i) {
            int best = 0;
            double bd = dist2(i, cent[0]);
            for (int c = 1; c < k; ++c) {
                double d = dist2(i, cent[c]);
                if (d < bd) {
                    bd = d;
                    best = c;
                }
            }
            assign[i] = best;
        }
        std::vector<std::vector<double>> sum(k, std::vector<double>(D, 0));
        std::vector<int> cnt(k, 0);
        for (int i = 0; i < n; ++i) {
            ++cnt[assign[i]];
            for (int j = 0; j < D; ++j) sum[assign[i]][j] += X(i, j);
        }
        for (int c = 0; c < k; ++c) {
            if (cnt[c] == 0) {
                // Re-seed an empty cluster at the point farthest from its centroid.
                int far = 0;
                double fd = -1;
                for (int i = 0; i < n; ++i) {
                    double d = dist2(i, cent[assign[i]]);
                    if (d > fd) {
                        fd = d;
                        far = i;
                    }
                }
                for (int j = 0; j < D; ++j) cent[c][j] = X(far, j);
            } else {
                for (int j = 0; j < D; ++j) cent[c][j] = sum[c][j] / cnt[c];
            }
        }
    }
    for (int i = 0; i < n; ++i) {
        int best = 0;
        double bd = dist2(i, cent[0]);
        for (int c = 1; c < k; ++c) {
            double d = dist2(i, cent[c]);
            if (d < bd) {
                bd = d;
                best = c;
            }
        }
        assign[i] = best;
    }

    std::vector<int> hist(k, 0);
    for (int a : assign) ++hist[a];
    double H = 0;
    for (int c = 0; c < k; ++c) {
        if (hist[c] == 0) continue;
        double p = static_cast<double>(hist[c]) / n;
        H -= p * std::log(p);
    }
    return H;
}

FdResult paired_fd(const Mat<double>& gen_l, const Mat<double>& spk, const Mat<double>& gt_l) {
    if (gen_l.rows != spk.rows || gt_l.rows != spk.rows)
        throw DimensionError("paired_fd: sample counts differ");
    if (gen_l.cols != gt_l.cols) throw DimensionError("paired_fd: listener dims differ");
    Mat<double> a(gen_l.rows, gen_l.cols + spk.cols), b(gt_l.rows, gt_l.cols + spk.cols);
    for (int r = 0; r < a.rows; ++r) {
        for (int c = 0; c < gen_l.cols; ++c) {
            a(r, c) = gen_l(r, c);
            b(r, c) = gt_l(r, c);
        }
        for (int c = 0; c < spk.cols; ++c) {
            a(r, gen_l.cols + c) = spk(r, c);
            b(r, gt_l.cols + c) = spk(r, c);
        }
    }
    return frechet_distance(a, b);
}

RpccResult rpcc(const std::vector<double>& gen_action, const std::vector<double>& gt_action,
                const std::vector<double>& spk_action) {
    if (gen_action.size() != gt_action.size() || gen_action.size() != spk_action.size())
        throw DimensionError("rpcc: signal lengths differ");
    if (gen_action.size() < 2) throw ValidationError("rpcc: need at least 2 samples");
    std::vector<double> residual(gen_action.size());
    for (std::size_t i = 0; i < residual.size(); ++i) residual[i] = gen_action[i] - gt_action[i];
    RpccResult out;
    out.value = std::abs(pearson(residual, spk_action, out.degenerate));
    return out;
}

CccResult ccc(const Mat<double>& X, const Mat<double>& Y) {
    if (!X.same_shape(Y)) throw DimensionError("ccc: shape mismatch");
    if (X.rows < 1) throw ValidationError("ccc: empty input");
    CccResult out;
    double sum = 0;
    for (int c = 0; c < X.cols; ++c) {
        double mx = 0, my = 0;
        for (int r = 0; r < X.rows; ++r) {
            mx += X(r, c);
            my += Y(r, c);
        }
        mx /= X.rows;
        my /= X.rows;
        double sxx = 0, syy = 0, sxy = 0;
        for (int r = 0; r < X.rows; ++r) {
            sxx += (X(r, c) - mx) * (X(r, c) - mx);
            syy += (Y(r, c) - my) * (Y(r, c) - my);
            sxy += (X(r, c) - mx) * (Y(r, c) - my);
        }
        if (sxx == 0 && syy == 0) {
            if (mx == my) {
                sum += 1.0;
            } else {
                out.degenerate = true;
            }
            continue;
        }
        if (sxx == 0 || syy == 0) {
            out.degenerate = true;
            continue;
        }
        int n = X.rows;
        double denom = sxx / n + syy / n + (mx - my) * (mx - my);
        sum += 2.0 * (sxy / n) / denom;
    }
    out.value = sum / X.cols;
    return out;
}

namespace {

// Mean squared entrywise difference between two equally shaped tracks.
double msd(const Mat<double>& a, const Mat<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a.a[i] - b.a[i];
        s += d * d;
    }
    return s / a.size();
}

}  // namespace

FrDiversity fr_diversity(const std::vector<std::vector<Mat<double>>>& gens) {
    if (gens.empty() || gens[0].empty()) throw ValidationError("fr_diversity: empty input");
    int K = static_cast<int>(gens.size());
    int N = static_cast<int>(gens[0].size());
    for (const auto& row : gens) {
        if (static_cast<int>(row.size()) != N)
            throw DimensionError("fr_diversity: ragged generation grid");
        for (const Mat<double>& m : row)
            if (!m.same_shape(gens[0][0])) throw DimensionError("fr_diversity: shape mismatch");
    }

    FrDiversity out;
    if (K > 1) {
        double acc = 0;
        long pairs = 0;
        for (int n = 0; n < N; ++n)
            for (int a = 0; a < K; ++a)
                for (int b = a + 1; b < K; ++b) {
                    acc += msd(gens[a][n], gens[b][n]);
                    ++pairs;
                }
        out.frdiv = acc / pairs;
    }
    if (N > 1) {
        double acc = 0;
        long pairs = 0;
        for (int k = 0; k < K; ++k)
            for (int a = 0; a < N; ++a)
                for (int b = a + 1; b < N; ++b) {
                    acc += msd(gens[k][a], gens[k][b]);
                    ++pairs;
                }
        out.frdvs = acc / pairs;
    }
    {
        const Mat<double>& first = gens[0][0];
        if (first.rows < 2) throw ValidationError("fr_diversity: sequences need >= 2 frames");
        double acc = 0;
        for (int k = 0; k < K; ++k)
            for (int n = 0; n < N; ++n) {
                const Mat<double>& m = gens[k][n];
                double chan = 0;
                for (int c = 0; c < m.cols; ++c) {
                    double mu = 0;
                    for (int t = 0; t < m.rows; ++t) mu += m(t, c);
                    mu /= m.rows;
                    double v = 0;
                    for (int t = 0; t < m.rows; ++t) v += (m(t, c) - mu) * (m(t, c) - mu);
                    chan += v / (m.rows - 1);
                }
                acc += chan / m.cols;
            }
        out.frvar = acc / (static_cast<double>(K) * N);
    }
    return out;
}

TlccResult tlcc(const std::vector<double>& x, const std::vector<double>& y, int max_lag) {
    if (x.size() != y.size()) throw DimensionError("tlcc: signal lengths differ");
    int T = static_cast<int>(x.size());
    if (max_lag < 0 || max_lag >= T - 1)
        throw ValidationError("tlcc: max_lag must lie in [0, T-2]");
    TlccResult out;
    out.curve.assign(2 * max_lag + 1, 0.0);
    for (int lag = -max_lag; lag <= max_lag; ++lag) {
        int lo = std::max(0, -lag), hi = std::min(T, T - lag);
        std::vector<double> xs, ys;
        for (int t = lo; t < hi; ++t) {
            xs.push_back(x[t]);
            ys.push_back(y[t + lag]);
        }
        bool degenerate = false;
        out.curve[lag + max_lag] = xs.size() >= 2 ? pearson(xs, ys, degenerate) : 0.0;
    }
    int best = 0;  // lag 0 first, then outward: ties keep the smallest |lag|
    double bv = out.curve[max_lag];
    for (int a = 1; a <= max_lag; ++a) {
        for (int lag : {-a, a}) {
            double v = out.curve[lag + max_lag];
            if (v > bv) {
                bv = v;
                best = lag;
            }
        }
    }
    out.peak_lag = best;
    return out;
}

double soft_dtw(const Mat<double>& a, const Mat<double>& b, double gamma) {
    if (a.cols != b.cols) throw DimensionError("soft_dtw: feature dims differ");
    if (a.rows < 1 || b.rows < 1) throw ValidationError("soft_dtw: empty sequence");
    if (!(gamma > 0)) throw ValidationError("soft_dtw: gamma must be positive");
    int n = a.rows, m = b.rows;
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> prev(m + 1, inf), cur(m + 1, inf);
    prev[0] = 0;
    auto softmin = [gamma, inf](double p, double q, double r) {
        double mn = std::min(p, std::min(q, r));
        if (mn == inf) return inf;
        double s = std::exp(-(p - mn) / gamma) + std::exp(-(q - mn) / gamma) +
                   std::exp(-(r - mn) / gamma);
        return mn - gamma * std::log(s);
    };
    for (int i = 1; i <= n; ++i) {
        cur[0] = inf;
        for (int j = 1; j <= m; ++j) {
            double cost = 0;
            for (int c = 0; c < a.cols; ++c) {
                double d = a(i - 1, c) - b(j - 1, c);
                cost += d * d;
            }
            cur[j] = cost + softmin(prev[j], cur[j - 1], prev[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

double soft_dtw(const std::vector<double>& a, const std::vector<double>& b, double gamma) {
    Mat<double> am(static_cast<int>(a.size()), 1), bm(static_cast<int>(b.size()), 1);
    for (std::size_t i = 0; i < a.size(); ++i) am(static_cast<int>(i), 0) = a[i];
    for (std::size_t i = 0; i < b.size(); ++i) bm(static_cast<int>(i), 0) = b[i];
    return soft_dtw(am, bm, gamma);
}

namespace {

struct ClusterStats {
    double inter = 0, intra = 0, ratio = 0;
    bool collapsed = false;
};

ClusterStats cluster_stats(const Mat<double>& X, const std::vector<int>& labels) {
    int maxl = *std::max_element(labels.begin(), labels.end());
    int k = maxl + 1;
    std::vector<std::vector<double>> cent(k, std::vector<double>(X.cols, 0));
    std::vector<int> cnt(k, 0);
    for (int i = 0; i < X.rows; ++i) {
        ++cnt[labels[i]];
        for (int c = 0; c < X.cols; ++c) cent[labels[i]][c] += X(i, c);
    }
    for (int l = 0; l < k; ++l) {
        if (cnt[l] == 0) throw ValidationError("cluster_integrity: empty cluster label");
        for (int c = 0; c < X.cols; ++c) cent[l][c] /= cnt[l];
    }
    ClusterStats st;
    long pairs = 0;
    for (int a = 0; a < k; ++a)
        for (int b = a + 1; b < k; ++b) {
            double s = 0;
            for (int c = 0; c < X.cols; ++c) {
                double d = cent[a][c] - cent[b][c];
                s += d * d;
            }
            st.inter += std::sqrt(s);
            ++pairs;
        }
    if (pairs > 0) st.inter /= pairs;
    for (int i = 0; i < X.rows; ++i) {
        double s = 0;
        for (int c = 0; c < X.cols; ++c) {
            double d = X(i, c) - cent[labels[i]][c];
            s += d * d;
        }
        st.intra += std::sqrt(s);
    }
    st.intra /= X.rows;
    if (st.intra == 0) {
        st.collapsed = true;
        st.ratio = std::numeric_limits<double>::infinity();
    } else {
        st.ratio = st.inter / st.intra;
    }
    return st;
}

}  // namespace

ClusterIntegrity cluster_integrity(const Mat<double>& before, const Mat<double>& after,
                                   const std::vector<int>& labels) {
    if (before.rows != after.rows) throw DimensionError("cluster_integrity: row counts differ");
    if (static_cast<int>(labels.size()) != before.rows)
        throw DimensionError("cluster_integrity: label count mismatch");
    if (before.rows < 2) throw ValidationError("cluster_integrity: need >= 2 sequences");
    for (int l : labels)
        if (l < 0) throw ValidationError("cluster_integrity: negative label");

    ClusterStats b = cluster_stats(before, labels);
    ClusterStats a = cluster_stats(after, labels);
    ClusterIntegrity out;
    out.inter_before = b.inter;
    out.intra_before = b.intra;
    out.ratio_before = b.ratio;
    out.inter_after = a.inter;
    out.intra_after = a.intra;
    out.ratio_after = a.ratio;
    out.degenerate = a.collapsed || b.collapsed;
    out.retention = out.degenerate ? std::numeric_limits<double>::infinity()
                                   : out.ratio_after / out.ratio_before;
    return out;
}

std::vector<double> lip_curvature(const MotionSequence& seq) {
    FeatureSchema sch = schema_for(seq.schema, seq.d());
    // Mouth proxy: mean over the leading expression coefficients (at most 4).
    int lo = 0, n = std::min(4, sch.expression_dims > 0 ? sch.expression_dims : seq.d());
    if (n == 0) throw ValidationError("lip_curvature: no expression channels");
    std::vector<double> out(seq.T());
    for (int t = 0; t < seq.T(); ++t) {
        double s = 0;
        for (int c = lo; c < lo + n; ++c) s += static_cast<double>(seq.frames(t, c));
        out[t] = s / n;
    }
    return out;
}

std::vector<double> head_motion(const MotionSequence& seq) {
    FeatureSchema sch = schema_for(seq.schema, seq.d());
    // Rotation slice: the first 3 pose channels when the schema has them, else
    // the trailing min(3, d) channels as a generic stand-in.
    int lo, n;
    if (sch.pose_dims > 0) {
        lo = sch.expression_dims;
        n = std::min(3, sch.pose_dims);
    } else {
        n = std::min(3, seq.d());
        lo = seq.d() - n;
    }
    if (n == 0) throw ValidationError("head_motion: no channels");
    std::vector<double> out(seq.T());
    for (int t = 0; t < seq.T(); ++t) {
        double s = 0;
        for (int c = lo; c < lo + n; ++c) {
            double v = static_cast<double>(seq.frames(t, c));
            s += v * v;
        }
        out[t] = std::sqrt(s);
    }
    return out;
}

void write_line_plot(const std::string& path, const std::string& title,
                     const std::vector<std::pair<std::string, std::vector<double>>>& series) {
    if (series.empty()) throw ValidationError("write_line_plot: no series");
    const int W = 720, H = 360, ML = 50, MR = 120, MT = 30, MB = 30;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    std::size_t n = 0;
    for (const auto& [name, v] : series) {
        n = std::max(n, v.size());
        for (double x : v) {
            if (!std::isfinite(x)) continue;
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
    }
    if (n < 2 || !std::isfinite(lo)) throw ValidationError("write_line_plot: not enough data");
    if (hi == lo) hi = lo + 1;

    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                   "#ff7f0e", "#8c564b", "#17becf"};
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write plot: " + path);
    f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
    f << "<rect width='100%' height='100%' fill='white'/>\n";
    f << "<text x='" << W / 2 << "' y='18' text-anchor='middle' font-size='14'>" << title
      << "</text>\n";
    f << "<line x1='" << ML << "' y1='" << H - MB << "' x2='" << W - MR << "' y2='" << H - MB
      << "' stroke='black'/>\n";
    f << "<line x1='" << ML << "' y1='" << MT << "' x2='" << ML << "' y2='" << H - MB
      << "' stroke='black'/>\n";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4g", hi);
    f << "<text x='4' y='" << MT + 4 << "' font-size='10'>" << buf << "</text>\n";
    std::snprintf(buf, sizeof(buf), "%.4g", lo);
    f << "<text x='4' y='" << H - MB << "' font-size='10'>" << buf << "</text>\n";
    for (std::size_t s = 0; s < series.size(); ++s) {
        const auto& v = series[s].second;
        if (v.size() < 2) continue;
        f << "<polyline fill='none' stroke='" << colors[s % 7] << "' points='";
        for (std::size_t i = 0; i < v.size(); ++i) {
            double px = ML + (W - ML - MR) * static_cast<double>(i) / (n - 1);
            double vy = std::isfinite(v[i]) ? v[i] : lo;
            double py = H - MB - (H - MT - MB) * (vy - lo) / (hi - lo);
            f << px << "," << py << " ";
        }
        f << "'/>\n";
        f << "<text x='" << W - MR + 6 << "' y='" << MT + 14 * (s + 1) << "' font-size='11' fill='"
          << colors[s % 7] << "'>" << series[s].first << "</text>\n";
    }
    f << "</svg>\n";
    if (!f) throw IoError("cannot write plot: " + path);
}

}  // namespace sfms::metrics
