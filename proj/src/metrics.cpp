#include "rangegen/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

#include "rangegen/errors.hpp"
#include "rangegen/io.hpp"
#include "rangegen/parallel.hpp"

namespace rangegen {

namespace {

double dist2(const Point3& a, const Point3& b) {
    const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
    return dx * dx + dy * dy + dz * dz;
}

// Median-split k-d tree for nearest-neighbor queries. Distances are computed
// with the same arithmetic as the brute-force path, so results agree exactly.
class KdTree {
  public:
    explicit KdTree(const std::vector<Point3>& points) : points_(points) {
        index_.resize(points.size());
        std::iota(index_.begin(), index_.end(), 0);
        nodes_.reserve(points.size());
        root_ = build(0, static_cast<int>(points.size()), 0);
    }

    double nearest_dist2(const Point3& query) const {
        double best = std::numeric_limits<double>::infinity();
        search(root_, query, best);
        return best;
    }

  private:
    struct Node {
        int point = -1;
        int left = -1, right = -1;
        int axis = 0;
    };

    int build(int begin, int end, int depth) {
        if (begin >= end) return -1;
        const int axis = depth % 3;
        const int mid = (begin + end) / 2;
        std::nth_element(index_.begin() + begin, index_.begin() + mid, index_.begin() + end,
                         [&](int a, int b) { return coord(points_[a], axis) <
                                                    coord(points_[b], axis); });
        Node node;
        node.point = index_[mid];
        node.axis = axis;
        const int self = static_cast<int>(nodes_.size());
        nodes_.push_back(node);
        nodes_[self].left = build(begin, mid, depth + 1);
        nodes_[self].right = build(mid + 1, end, depth + 1);
        return self;
    }

    static double coord(const Point3& p, int axis) {
        return axis == 0 ? p.x : (axis == 1 ? p.y : p.z);
    }

    void search(int node_id, const Point3& query, double& best) const {
        if (node_id < 0) return;
        const Node& node = nodes_[node_id];
        best = std::min(best, dist2(query, points_[node.point]));
        const double delta = coord(query, node.axis) - coord(points_[node.point], node.axis);
        const int near = delta < 0.0 ? node.left : node.right;
        const int far = delta < 0.0 ? node.right : node.left;
        search(near, query, best);
        if (delta * delta < best) search(far, query, best);
    }

    const std::vector<Point3>& points_;
    std::vector<int> index_;
    std::vector<Node> nodes_;
    int root_ = -1;
};

}  // namespace

// ---- BEV ----

double BevGrid::total() const {
    double acc = 0.0;
    for (double c : counts) acc += c;
    return acc;
}

BevGrid bev_histogram(const PointCloud& cloud, int cells, double cell_size) {
    if (cells < 1 || !(cell_size > 0.0))
        throw std::invalid_argument("bev_histogram: bad grid parameters");
    BevGrid grid;
    grid.cells = cells;
    grid.cell_size = cell_size;
    grid.half_extent = cells * cell_size / 2.0;
    grid.counts.assign(static_cast<size_t>(cells) * cells, 0.0);
    for (const Point3& p : cloud.points) {
        if (!(std::abs(p.x) < grid.half_extent) || !(std::abs(p.y) < grid.half_extent)) {
            ++grid.dropped;
            continue;
        }
        const int ix = static_cast<int>(std::floor((p.x + grid.half_extent) / cell_size));
        const int iy = static_cast<int>(std::floor((p.y + grid.half_extent) / cell_size));
        grid.counts[static_cast<size_t>(iy) * cells + ix] += 1.0;
    }
    return grid;
}

double jsd(const std::vector<PointCloud>& set_r, const std::vector<PointCloud>& set_s) {
    if (set_r.empty() || set_s.empty()) throw InsufficientDataError("jsd: empty scene set");

    const auto pooled = [](const std::vector<PointCloud>& set) {
        BevGrid grid;
        grid.cells = kJsdCells;
        grid.cell_size = kJsdCellSize;
        grid.half_extent = kJsdCells * kJsdCellSize / 2.0;
        grid.counts.assign(static_cast<size_t>(kJsdCells) * kJsdCells, 0.0);
        for (const PointCloud& cloud : set) {
            const BevGrid one = bev_histogram(cloud, kJsdCells, kJsdCellSize);
            for (size_t i = 0; i < grid.counts.size(); ++i) grid.counts[i] += one.counts[i];
        }
        return grid;
    };

    const BevGrid hr = pooled(set_r);
    const BevGrid hs = pooled(set_s);
    const double nr = hr.total(), ns = hs.total();
    if (nr <= 0.0 || ns <= 0.0)
        throw InsufficientDataError("jsd: a set has no points inside the evaluation extent");

    double acc = 0.0;
    for (size_t i = 0; i < hr.counts.size(); ++i) {
        const double p = hr.counts[i] / nr;
        const double q = hs.counts[i] / ns;
        if (p == 0.0 && q == 0.0) continue;
        const double m = 0.5 * (p + q);
        if (p > 0.0) acc += 0.5 * p * std::log2(p / m);
        if (q > 0.0) acc += 0.5 * q * std::log2(q / m);
    }
    return acc;
}

double chamfer(const PointCloud& x, const PointCloud& y) {
    if (x.empty() || y.empty()) throw std::invalid_argument("chamfer: empty point cloud");
    const KdTree tree_x(x.points);
    const KdTree tree_y(y.points);
    double acc = 0.0;
    for (const Point3& p : x.points) acc += tree_y.nearest_dist2(p);
    for (const Point3& q : y.points) acc += tree_x.nearest_dist2(q);
    return acc;
}

// ---- EMD ----

namespace {

// Shortest-augmenting-path solution of the square assignment problem
// (Jonker-Volgenant style). Returns the assigned column per row.
std::vector<int> solve_assignment(const std::vector<double>& cost, int n) {
    constexpr double kInf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n, 0.0), v(n, 0.0), shortest(n);
    std::vector<int> col4row(n, -1), row4col(n, -1), path(n, -1);
    std::vector<char> sr(n), sc(n);

    for (int cur_row = 0; cur_row < n; ++cur_row) {
        std::fill(shortest.begin(), shortest.end(), kInf);
        std::fill(sr.begin(), sr.end(), 0);
        std::fill(sc.begin(), sc.end(), 0);
        double min_val = 0.0;
        int i = cur_row;
        int sink = -1;
        while (sink == -1) {
            sr[i] = 1;
            int index = -1;
            double lowest = kInf;
            for (int j = 0; j < n; ++j) {
                if (sc[j]) continue;
                const double r = min_val + cost[static_cast<size_t>(i) * n + j] - u[i] - v[j];
                if (r < shortest[j]) {
                    path[j] = i;
                    shortest[j] = r;
                }
                if (shortest[j] < lowest ||
                    (shortest[j] == lowest && row4col[j] == -1)) {
                    lowest = shortest[j];
                    index = j;
                }
            }
            min_val = lowest;
            if (index == -1 || min_val == kInf)
                throw std::runtime_error("assignment: infeasible cost matrix");
            if (row4col[index] == -1)
                sink = index;
            else
                i = row4col[index];
            sc[index] = 1;
        }
        u[cur_row] += min_val;
        for (int k = 0; k < n; ++k) {
            if (sr[k] && k != cur_row) u[k] += min_val - shortest[col4row[k]];
        }
        for (int j = 0; j < n; ++j) {
            if (sc[j]) v[j] -= min_val - shortest[j];
        }
        int j = sink;
        while (true) {
            const int pi = path[j];
            row4col[j] = pi;
            std::swap(col4row[pi], j);
            if (pi == cur_row) break;
        }
    }
    return col4row;
}

}  // namespace

EmdResult emd(const PointCloud& x, const PointCloud& y, const EmdOptions& opts) {
    if (x.empty() || y.empty()) throw std::invalid_argument("emd: empty point cloud");
    if (x.size() != y.size())
        throw std::invalid_argument("emd: point counts differ (" + std::to_string(x.size()) +
                                    " vs " + std::to_string(y.size()) + ")");
    const int n = static_cast<int>(x.size());

    std::vector<double> cost(static_cast<size_t>(n) * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            cost[static_cast<size_t>(i) * n + j] = std::sqrt(dist2(x.points[i], y.points[j]));

    EmdResult res;
    if (static_cast<size_t>(n) <= opts.exact_cap) {
        const std::vector<int> assign = solve_assignment(cost, n);
        double total = 0.0;
        for (int i = 0; i < n; ++i) total += cost[static_cast<size_t>(i) * n + assign[i]];
        res.value = total;
        res.exact = true;
        return res;
    }
    if (!opts.allow_approx)
        throw std::invalid_argument(
            "emd: point count exceeds the exact-solver cap; enable approximate mode");

    // Entropic regularization in log domain, then a greedy rounding to a
    // feasible assignment (upper bound) and feasible duals (lower bound).
    const double epsilon = opts.approx_epsilon;
    std::vector<double> f(n, 0.0), g(n, 0.0);
    const double log_marginal = -std::log(static_cast<double>(n));
    for (int it = 0; it < opts.approx_iters; ++it) {
        for (int i = 0; i < n; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < n; ++j)
                mx = std::max(mx, (g[j] - cost[static_cast<size_t>(i) * n + j]) / epsilon);
            double acc = 0.0;
            for (int j = 0; j < n; ++j)
                acc += std::exp((g[j] - cost[static_cast<size_t>(i) * n + j]) / epsilon - mx);
            f[i] = epsilon * (log_marginal - mx - std::log(acc));
        }
        for (int j = 0; j < n; ++j) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int i = 0; i < n; ++i)
                mx = std::max(mx, (f[i] - cost[static_cast<size_t>(i) * n + j]) / epsilon);
            double acc = 0.0;
            for (int i = 0; i < n; ++i)
                acc += std::exp((f[i] - cost[static_cast<size_t>(i) * n + j]) / epsilon - mx);
            g[j] = epsilon * (log_marginal - mx - std::log(acc));
        }
    }
    // Greedy rounding on the transport weights.
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::vector<char> used(n, 0);
    double upper = 0.0;
    for (int i : order) {
        int best_j = -1;
        double best_w = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j) {
            if (used[j]) continue;
            const double w = f[i] + g[j] - cost[static_cast<size_t>(i) * n + j];
            if (w > best_w) {
                best_w = w;
                best_j = j;
            }
        }
        used[best_j] = 1;
        upper += cost[static_cast<size_t>(i) * n + best_j];
    }
    // Feasible duals: tighten f to satisfy f_i + g_j <= c_ij, then bound.
    double lower = 0.0;
    for (int i = 0; i < n; ++i) {
        double fi = std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j)
            fi = std::min(fi, cost[static_cast<size_t>(i) * n + j] - g[j]);
        lower += fi;
    }
    for (int j = 0; j < n; ++j) lower += g[j];

    res.value = upper;
    res.exact = false;
    res.duality_gap = std::max(0.0, upper - lower);
    return res;
}

// ---- MMD ----

namespace {

PointCloud occupied_cell_centers(const PointCloud& cloud) {
    const BevGrid grid = bev_histogram(cloud, kMmdCells, kMmdCellSize);
    PointCloud centers;
    for (int iy = 0; iy < grid.cells; ++iy)
        for (int ix = 0; ix < grid.cells; ++ix) {
            if (grid.counts[static_cast<size_t>(iy) * grid.cells + ix] <= 0.0) continue;
            centers.points.push_back({(ix + 0.5) * grid.cell_size - grid.half_extent,
                                      (iy + 0.5) * grid.cell_size - grid.half_extent, 0.0});
        }
    return centers;
}

}  // namespace

double mmd(const std::vector<PointCloud>& set_r, const std::vector<PointCloud>& set_s) {
    if (set_r.empty() || set_s.empty()) throw InsufficientDataError("mmd: empty scene set");
    std::vector<PointCloud> centers_r, centers_s;
    for (const PointCloud& c : set_r) centers_r.push_back(occupied_cell_centers(c));
    for (const PointCloud& c : set_s) centers_s.push_back(occupied_cell_centers(c));

    double acc = 0.0;
    for (const PointCloud& ref : centers_r) {
        double best = std::numeric_limits<double>::infinity();
        for (const PointCloud& gen : centers_s) best = std::min(best, chamfer(gen, ref));
        acc += best;
    }
    return acc / static_cast<double>(centers_r.size());
}

// ---- partition aggregation ----

std::vector<double> partition_aggregate(const nn::Tensor& activation_map,
                                        const std::vector<uint8_t>& mask, int partitions,
                                        AggregationMode mode, uint64_t* empty_partitions) {
    if (activation_map.ndim() != 3)
        throw ConfigError("partition_aggregate: expected a [C,H,W] activation map");
    const int channels = activation_map.dim(0);
    const int height = activation_map.dim(1);
    const int width = activation_map.dim(2);
    if (static_cast<int64_t>(mask.size()) != static_cast<int64_t>(height) * width)
        throw ConfigError("partition_aggregate: mask size mismatch");
    if (mode == AggregationMode::depth && height % partitions != 0)
        throw ConfigError("partition_aggregate: H not divisible by P");
    if (mode == AggregationMode::angle && width % partitions != 0)
        throw ConfigError("partition_aggregate: W not divisible by P");

    const int64_t plane = static_cast<int64_t>(height) * width;
    std::vector<double> out(static_cast<size_t>(partitions) * channels, 0.0);
    std::vector<double> counts(partitions, 0.0);
    const int band_rows = mode == AggregationMode::depth ? height / partitions : 0;
    const int band_cols = mode == AggregationMode::angle ? width / partitions : 0;

    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            if (!mask[static_cast<size_t>(r) * width + c]) continue;
            const int part = mode == AggregationMode::depth ? r / band_rows : c / band_cols;
            counts[part] += 1.0;
            for (int ch = 0; ch < channels; ++ch)
                out[static_cast<size_t>(part) * channels + ch] +=
                    activation_map.data()[ch * plane + static_cast<int64_t>(r) * width + c];
        }
    }
    for (int part = 0; part < partitions; ++part) {
        if (counts[part] == 0.0) {
            if (empty_partitions) ++*empty_partitions;
            continue;  // zero vector for empty partitions
        }
        for (int ch = 0; ch < channels; ++ch)
            out[static_cast<size_t>(part) * channels + ch] /= counts[part];
    }
    return out;
}

std::vector<double> partition_aggregate_voxels(
    const std::vector<ToyVoxelExtractor::VoxelFeature>& voxels, int channels, int partitions,
    AggregationMode mode, double max_range, uint64_t* empty_partitions) {
    std::vector<double> out(static_cast<size_t>(partitions) * channels, 0.0);
    std::vector<double> counts(partitions, 0.0);
    for (const auto& vox : voxels) {
        int part;
        if (mode == AggregationMode::depth) {
            const double radius = std::hypot(vox.centroid.x, vox.centroid.y);
            part = std::min(partitions - 1,
                            static_cast<int>(radius / (max_range / partitions)));
        } else {
            const double yaw = std::atan2(vox.centroid.y, vox.centroid.x);  // (-pi, pi]
            const double a = (yaw / M_PI + 1.0) / 2.0;
            part = std::min(partitions - 1, static_cast<int>(a * partitions));
        }
        counts[part] += 1.0;
        for (int ch = 0; ch < channels; ++ch)
            out[static_cast<size_t>(part) * channels + ch] += vox.feature[ch];
    }
    for (int part = 0; part < partitions; ++part) {
        if (counts[part] == 0.0) {
            if (empty_partitions) ++*empty_partitions;
            continue;
        }
        for (int ch = 0; ch < channels; ++ch)
            out[static_cast<size_t>(part) * channels + ch] /= counts[part];
    }
    return out;
}

// ---- Gaussian stats / Frechet ----

FeatureStats gaussian_stats(const std::vector<std::vector<double>>& vectors) {
    if (vectors.size() < 2)
        throw InsufficientDataError("gaussian_stats: need at least two samples");
    const size_t dim = vectors.front().size();
    for (const auto& v : vectors)
        if (v.size() != dim) throw std::invalid_argument("gaussian_stats: ragged vectors");

    FeatureStats stats;
    stats.n = vectors.size();
    stats.mu.assign(dim, 0.0);
    for (const auto& v : vectors)
        for (size_t i = 0; i < dim; ++i) stats.mu[i] += v[i];
    for (size_t i = 0; i < dim; ++i) stats.mu[i] /= static_cast<double>(stats.n);

    stats.sigma.assign(dim * dim, 0.0);
    for (const auto& v : vectors) {
        for (size_t i = 0; i < dim; ++i) {
            const double di = v[i] - stats.mu[i];
            for (size_t j = i; j < dim; ++j)
                stats.sigma[i * dim + j] += di * (v[j] - stats.mu[j]);
        }
    }
    const double denom = static_cast<double>(stats.n - 1);
    for (size_t i = 0; i < dim; ++i)
        for (size_t j = i; j < dim; ++j) {
            stats.sigma[i * dim + j] /= denom;
            stats.sigma[j * dim + i] = stats.sigma[i * dim + j];
        }
    return stats;
}

FrechetResult frechet_distance(const FeatureStats& a, const FeatureStats& b) {
    if (a.dim() != b.dim()) throw std::invalid_argument("frechet_distance: dimension mismatch");
    const int dim = a.dim();
    using Mat = Eigen::MatrixXd;
    Eigen::Map<const Mat> sa(a.sigma.data(), dim, dim);
    Eigen::Map<const Mat> sb(b.sigma.data(), dim, dim);

    FrechetResult res;

    // sqrt(Sa) via eigendecomposition, negative eigenvalues clamped.
    Eigen::SelfAdjointEigenSolver<Mat> eig_a(sa);
    Eigen::VectorXd la = eig_a.eigenvalues();
    for (int i = 0; i < dim; ++i) {
        if (la[i] < 0.0) {
            res.eigen_clamp += -la[i];
            la[i] = 0.0;
        }
    }
    const Mat sqrt_a =
        eig_a.eigenvectors() * la.cwiseSqrt().asDiagonal() * eig_a.eigenvectors().transpose();

    // tr sqrt(Sa Sb) = tr sqrt(sqrt(Sa) Sb sqrt(Sa)) on the symmetrized product.
    Mat inner = sqrt_a * sb * sqrt_a;
    inner = 0.5 * (inner + inner.transpose());
    Eigen::SelfAdjointEigenSolver<Mat> eig_i(inner);
    double tr_sqrt = 0.0;
    for (int i = 0; i < dim; ++i) {
        double l = eig_i.eigenvalues()[i];
        if (l < 0.0) {
            res.eigen_clamp += -l;
            l = 0.0;
        }
        tr_sqrt += std::sqrt(l);
    }

    double mean_term = 0.0;
    for (int i = 0; i < dim; ++i) {
        const double d = a.mu[i] - b.mu[i];
        mean_term += d * d;
    }
    res.value = std::max(0.0, mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt);
    return res;
}

void save_stats(const FeatureStats& stats, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os.write("LFS1", 4);
    const uint32_t dim = static_cast<uint32_t>(stats.dim());
    os.write(reinterpret_cast<const char*>(&dim), 4);
    os.write(reinterpret_cast<const char*>(&stats.n), 8);
    os.write(reinterpret_cast<const char*>(stats.mu.data()),
             static_cast<std::streamsize>(dim * sizeof(double)));
    os.write(reinterpret_cast<const char*>(stats.sigma.data()),
             static_cast<std::streamsize>(static_cast<size_t>(dim) * dim * sizeof(double)));
    if (!os) throw IoError("write failed: " + path.string());
}

FeatureStats load_stats(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open stats cache: " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "LFS1", 4) != 0)
        throw FormatError("bad stats-cache magic: " + path.string());
    uint32_t dim = 0;
    is.read(reinterpret_cast<char*>(&dim), 4);
    FeatureStats stats;
    is.read(reinterpret_cast<char*>(&stats.n), 8);
    if (!is || dim == 0 || dim > (1u << 16))
        throw FormatError("bad stats-cache header: " + path.string());
    stats.mu.resize(dim);
    stats.sigma.resize(static_cast<size_t>(dim) * dim);
    is.read(reinterpret_cast<char*>(stats.mu.data()),
            static_cast<std::streamsize>(dim * sizeof(double)));
    is.read(reinterpret_cast<char*>(stats.sigma.data()),
            static_cast<std::streamsize>(stats.sigma.size() * sizeof(double)));
    if (!is) throw FormatError("truncated stats cache: " + path.string());
    return stats;
}

// ---- voxelization ----

std::vector<Voxel> voxelize_sparse(const PointCloud& cloud, double voxel_size) {
    if (!(voxel_size > 0.0)) throw std::invalid_argument("voxelize_sparse: bad voxel size");
    std::map<std::tuple<long, long, long>, Voxel> cells;
    for (const Point3& p : cloud.points) {
        const long ix = static_cast<long>(std::floor(p.x / voxel_size));
        const long iy = static_cast<long>(std::floor(p.y / voxel_size));
        const long iz = static_cast<long>(std::floor(p.z / voxel_size));
        Voxel& vox = cells[{ix, iy, iz}];
        if (vox.count == 0) {
            vox.ix = ix;
            vox.iy = iy;
            vox.iz = iz;
            vox.z_min = p.z;
            vox.z_max = p.z;
        }
        ++vox.count;
        vox.centroid.x += p.x;
        vox.centroid.y += p.y;
        vox.centroid.z += p.z;
        vox.z_min = std::min(vox.z_min, p.z);
        vox.z_max = std::max(vox.z_max, p.z);
        const double r = std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z);
        vox.radius_sum += r;
        vox.radius_sq_sum += r * r;
    }
    std::vector<Voxel> out;
    out.reserve(cells.size());
    for (auto& [key, vox] : cells) {
        vox.centroid.x /= static_cast<double>(vox.count);
        vox.centroid.y /= static_cast<double>(vox.count);
        vox.centroid.z /= static_cast<double>(vox.count);
        out.push_back(vox);
    }
    return out;
}

// ---- pipeline ----

std::vector<double> scene_feature_vector(const RangeImage& img,
                                         const FeatureExtractor& extractor, int partitions,
                                         AggregationMode mode, uint64_t* empty_partitions) {
    return extractor.scene_features({}, img, partitions, mode, empty_partitions);
}

namespace {

FrPipelineResult fr_pipeline_impl(
    const std::vector<std::pair<std::filesystem::path, const RangeImage*>>& ref,
    const std::vector<std::pair<std::filesystem::path, const RangeImage*>>& gen,
    const FeatureExtractor& extractor, const FrPipelineOptions& opts) {
    FrPipelineResult res;

    const auto collect = [&](const auto& items, size_t& usable) {
        // Indexed slots so multi-worker extraction reduces in enumeration
        // order; per-file failures are reported, not fatal, unless the set
        // drops below two usable scenes.
        std::vector<std::optional<std::vector<double>>> slots(items.size());
        std::vector<uint64_t> empties(items.size(), 0);
        std::vector<std::string> failures(items.size());
        parallel_for(items.size(), opts.workers, [&](size_t i) {
            const auto& [path, img_ptr] = items[i];
            try {
                RangeImage img;
                const RangeImage* img_ref = img_ptr;
                if (!img_ref) {
                    img = load_lri(path);
                    img_ref = &img;
                }
                slots[i] = extractor.scene_features(path, *img_ref, opts.partitions, opts.mode,
                                                    &empties[i]);
            } catch (const std::exception& e) {
                failures[i] = (path.empty() ? std::string("<memory>") : path.string()) + ": " +
                              e.what();
            }
        });
        std::vector<std::vector<double>> features;
        for (size_t i = 0; i < slots.size(); ++i) {
            res.empty_partitions += empties[i];
            if (slots[i]) {
                features.push_back(std::move(*slots[i]));
            } else {
                ++res.failed_files;
                fprintf(stderr, "fr_pipeline: skipping %s\n", failures[i].c_str());
            }
        }
        usable = features.size();
        return features;
    };

    FeatureStats ref_stats;
    bool have_ref_stats = false;
    if (opts.ref_stats_cache && std::filesystem::exists(*opts.ref_stats_cache)) {
        ref_stats = load_stats(*opts.ref_stats_cache);
        res.ref_scenes = ref_stats.n;
        res.ref_stats_from_cache = true;
        have_ref_stats = true;
    }
    if (!have_ref_stats) {
        const auto ref_features = collect(ref, res.ref_scenes);
        if (ref_features.size() < 2)
            throw InsufficientDataError("fr_pipeline: fewer than two usable reference scenes");
        ref_stats = gaussian_stats(ref_features);
        if (opts.ref_stats_cache) save_stats(ref_stats, *opts.ref_stats_cache);
    }

    const auto gen_features = collect(gen, res.gen_scenes);
    if (gen_features.size() < 2)
        throw InsufficientDataError("fr_pipeline: fewer than two usable generated scenes");
    const FeatureStats gen_stats = gaussian_stats(gen_features);

    const FrechetResult fr = frechet_distance(ref_stats, gen_stats);
    res.value = fr.value;
    res.eigen_clamp = fr.eigen_clamp;
    return res;
}

}  // namespace

FrPipelineResult fr_pipeline(const std::vector<std::filesystem::path>& ref_files,
                             const std::vector<std::filesystem::path>& gen_files,
                             const FeatureExtractor& extractor, const FrPipelineOptions& opts) {
    std::vector<std::pair<std::filesystem::path, const RangeImage*>> ref, gen;
    for (const auto& p : ref_files) ref.emplace_back(p, nullptr);
    for (const auto& p : gen_files) gen.emplace_back(p, nullptr);
    return fr_pipeline_impl(ref, gen, extractor, opts);
}

FrPipelineResult fr_pipeline_images(const std::vector<RangeImage>& ref,
                                    const std::vector<RangeImage>& gen,
                                    const FeatureExtractor& extractor,
                                    const FrPipelineOptions& opts) {
    std::vector<std::pair<std::filesystem::path, const RangeImage*>> ref_items, gen_items;
    for (const RangeImage& img : ref) ref_items.emplace_back(std::filesystem::path(), &img);
    for (const RangeImage& img : gen) gen_items.emplace_back(std::filesystem::path(), &img);
    return fr_pipeline_impl(ref_items, gen_items, extractor, opts);
}

}  // namespace rangegen
