#pragma once

// Trajectory knowledge base: construction from a dataset, binary
// serialization, exact nearest-neighbour retrieval (linear scan, plus an
// optional kd-tree that must agree bitwise), least-squares key combination,
// and value lookup.

#include "redi/solver.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace redi {

// ---------------------------------------------------------------- types

struct KbMeta {
  std::uint32_t version = 1;
  std::uint32_t dim = 0;
  std::uint32_t n_steps = 0;
  std::uint32_t k_step = 0;
  double beta0 = 0.0;
  double beta1 = 0.0;
  double t_floor = 0.0;
  Method method = Method::euler;
  double w_g = 1.0;
};

// One stored trajectory: its condition, the seed that reproduces it, and
// the flattened state suffix ordered step k down to step 0.
struct KbEntry {
  Condition condition;
  std::uint64_t seed = 0;
  Vec suffix;  // (k_step + 1) * dim doubles
};

class KnowledgeBase {
 public:
  KbMeta meta;
  std::vector<KbEntry> entries;
  // Median distance from each key to its nearest *other* key; 0 when the
  // KB holds fewer than two entries. Computed eagerly after build/load and
  // used as the unit of the retrieval trust radius.
  double median_nn_distance = 0.0;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }

  // State of entry `i` at grid step `step` (k_step >= step >= 0).
  Vec state_at(std::size_t i, std::uint32_t step) const {
    if (i >= entries.size())
      throw ValidationError("knowledge base entry index out of range");
    if (step > meta.k_step)
      throw ValidationError("requested step exceeds the stored k_step");
    return entries[i].suffix.segment(
        static_cast<Eigen::Index>((meta.k_step - step) * meta.dim),
        static_cast<Eigen::Index>(meta.dim));
  }

  Vec key(std::size_t i) const { return state_at(i, meta.k_step); }

  // Recompute median_nn_distance. Called by build_kb/load_kb.
  void refresh_nn_stats();
};

struct BuildFailure {
  std::size_t item_index = 0;
  int step = 0;
  std::string message;
};

struct BuildLog {
  std::vector<BuildFailure> failures;
};

struct Neighbor {
  std::size_t index = 0;
  double distance = 0.0;
};

struct RetrievalResult {
  std::vector<std::size_t> indices;  // ascending distance, ties by id
  std::vector<double> distances;
  Vec weights;
  double residual = 0.0;
  Vec combined_value;
};

// ---------------------------------------------------------------- build

// Solve one full trajectory per dataset item and store its suffix. Item i
// uses seed base_seed + i; its terminal noise comes from the derived
// stream seed + kNoiseStreamOffset so that inference can replay the same
// start state from the same seed. Diverging items are skipped (and logged
// when `log` is given) rather than aborting the build.
inline KnowledgeBase build_kb(const World& world, const Schedule& sched,
                              const StepGrid& grid,
                              const std::vector<std::pair<Vec, Condition>>& dataset,
                              int k_step, Method method, double w_g,
                              std::uint64_t base_seed,
                              BuildLog* log = nullptr) {
  if (k_step <= 0 || k_step >= grid.n_steps)
    throw ValidationError("k_step must satisfy 0 < k_step < n_steps");
  KnowledgeBase kb;
  kb.meta.version = 1;
  kb.meta.dim = static_cast<std::uint32_t>(world.dim);
  kb.meta.n_steps = static_cast<std::uint32_t>(grid.n_steps);
  kb.meta.k_step = static_cast<std::uint32_t>(k_step);
  kb.meta.beta0 = sched.beta0;
  kb.meta.beta1 = sched.beta1;
  kb.meta.t_floor = grid.t_floor;
  kb.meta.method = method;
  kb.meta.w_g = w_g;
  kb.entries.reserve(dataset.size());

  const Eigen::Index d = world.dim;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& [x0, y] = dataset[i];
    if (x0.size() != d)
      throw ValidationError("dataset item dimension differs from the world");
    world.check(y);
    const std::uint64_t seed = base_seed + i;
    Rng noise(seed + kNoiseStreamOffset);
    Vec x_t = forward_noise_with(sched, x0, sched.t_max, noise.normal_vec(d));
    try {
      Trajectory traj =
          solve_cond(world, sched, grid, x_t, grid.n_steps, 0, y, w_g, method);
      KbEntry entry;
      entry.condition = y;
      entry.seed = seed;
      entry.suffix.resize(static_cast<Eigen::Index>(k_step + 1) * d);
      for (int s = k_step; s >= 0; --s)
        entry.suffix.segment(static_cast<Eigen::Index>(k_step - s) * d, d) =
            traj.at_step(grid.n_steps, s);
      kb.entries.push_back(std::move(entry));
    } catch (const DivergenceError& err) {
      if (log) log->failures.push_back({i, err.step, err.what()});
    }
  }
  kb.refresh_nn_stats();
  return kb;
}

// ---------------------------------------------------------------- query

// Exact top-H nearest keys by Euclidean distance; ties broken by lower
// entry id. This linear scan is the reference semantics — KdIndex must
// reproduce it bitwise.
inline std::vector<Neighbor> query_top_h(const KnowledgeBase& kb, const Vec& q,
                                         int h) {
  if (kb.empty()) throw ValidationError("query on an empty knowledge base");
  if (h < 1) throw ValidationError("H must be >= 1");
  if (static_cast<std::size_t>(h) > kb.size())
    throw ValidationError("H exceeds the knowledge base size");
  if (q.size() != static_cast<Eigen::Index>(kb.meta.dim))
    throw DimMismatchError("query dimension differs from the knowledge base");

  std::vector<std::pair<double, std::size_t>> d2(kb.size());
  for (std::size_t i = 0; i < kb.size(); ++i)
    d2[i] = {(kb.key(i) - q).squaredNorm(), i};
  std::partial_sort(d2.begin(), d2.begin() + h, d2.end());
  std::vector<Neighbor> out(static_cast<std::size_t>(h));
  for (int i = 0; i < h; ++i)
    out[static_cast<std::size_t>(i)] = {d2[static_cast<std::size_t>(i)].second,
                                        std::sqrt(d2[static_cast<std::size_t>(i)].first)};
  return out;
}

// ---------------------------------------------------------------- kd-tree

// Optional exact kd-tree index over entry keys. Query results are bitwise
// identical to query_top_h: same squared distances (identical Eigen
// reduction order), same (distance, id) tie ordering, same final sqrt.
// Subtrees are pruned only when their bounding-box distance is strictly
// greater than the current worst candidate, so equal-distance ties are
// always visited and resolved by id.
class KdIndex {
 public:
  explicit KdIndex(const KnowledgeBase& kb)
      : dim_(static_cast<Eigen::Index>(kb.meta.dim)) {
    const std::size_t n = kb.size();
    keys_.resize(dim_, static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) keys_.col(static_cast<Eigen::Index>(i)) = kb.key(i);
    order_.resize(n);
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    nodes_.reserve(2 * n + 1);
    root_ = n == 0 ? -1 : build(0, n, 0);
  }

  std::vector<Neighbor> query(const Vec& q, int h) const {
    if (order_.empty())
      throw ValidationError("query on an empty knowledge base");
    if (h < 1) throw ValidationError("H must be >= 1");
    if (static_cast<std::size_t>(h) > order_.size())
      throw ValidationError("H exceeds the knowledge base size");
    if (q.size() != dim_)
      throw DimMismatchError("query dimension differs from the knowledge base");

    // Max-heap of the current best (d2, id) pairs; top() is the worst.
    std::vector<std::pair<double, std::size_t>> heap;
    heap.reserve(static_cast<std::size_t>(h));
    search(root_, q, static_cast<std::size_t>(h), heap);
    std::sort_heap(heap.begin(), heap.end());
    std::vector<Neighbor> out(heap.size());
    for (std::size_t i = 0; i < heap.size(); ++i)
      out[i] = {heap[i].second, std::sqrt(heap[i].first)};
    return out;
  }

 private:
  struct Node {
    int left = -1, right = -1;
    std::size_t begin = 0, end = 0;  // leaf range into order_
    Vec lo, hi;                      // bounding box of the subtree
  };

  static constexpr std::size_t kLeafSize = 8;

  int build(std::size_t begin, std::size_t end, int depth) {
    Node node;
    node.lo = Vec::Constant(dim_, std::numeric_limits<double>::infinity());
    node.hi = Vec::Constant(dim_, -std::numeric_limits<double>::infinity());
    for (std::size_t i = begin; i < end; ++i) {
      const auto col = keys_.col(static_cast<Eigen::Index>(order_[i]));
      node.lo = node.lo.cwiseMin(col);
      node.hi = node.hi.cwiseMax(col);
    }
    if (end - begin <= kLeafSize) {
      node.begin = begin;
      node.end = end;
      nodes_.push_back(std::move(node));
      return static_cast<int>(nodes_.size()) - 1;
    }
    const Eigen::Index axis = depth % dim_;
    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin),
                     order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(end),
                     [&](std::size_t a, std::size_t b) {
                       double ka = keys_(axis, static_cast<Eigen::Index>(a));
                       double kb = keys_(axis, static_cast<Eigen::Index>(b));
                       return ka < kb || (ka == kb && a < b);
                     });
    int left = build(begin, mid, depth + 1);
    int right = build(mid, end, depth + 1);
    node.left = left;
    node.right = right;
    nodes_.push_back(std::move(node));
    return static_cast<int>(nodes_.size()) - 1;
  }

  double box_d2(const Node& node, const Vec& q) const {
    double acc = 0.0;
    for (Eigen::Index a = 0; a < dim_; ++a) {
      double gap = 0.0;
      if (q[a] < node.lo[a]) gap = node.lo[a] - q[a];
      else if (q[a] > node.hi[a]) gap = node.hi[a] - q[a];
      acc += gap * gap;
    }
    return acc;
  }

  void consider(std::size_t id, const Vec& q, std::size_t h,
                std::vector<std::pair<double, std::size_t>>& heap) const {
    // Identical arithmetic to the scan: materialize the difference and use
    // the same squaredNorm reduction.
    Vec diff = keys_.col(static_cast<Eigen::Index>(id)) - q;
    std::pair<double, std::size_t> cand{diff.squaredNorm(), id};
    if (heap.size() < h) {
      heap.push_back(cand);
      std::push_heap(heap.begin(), heap.end());
    } else if (cand < heap.front()) {
      std::pop_heap(heap.begin(), heap.end());
      heap.back() = cand;
      std::push_heap(heap.begin(), heap.end());
    }
  }

  void search(int node_id, const Vec& q, std::size_t h,
              std::vector<std::pair<double, std::size_t>>& heap) const {
    const Node& node = nodes_[static_cast<std::size_t>(node_id)];
    if (heap.size() == h && box_d2(node, q) > heap.front().first) return;
    if (node.left < 0) {
      for (std::size_t i = node.begin; i < node.end; ++i)
        consider(order_[i], q, h, heap);
      return;
    }
    double dl = box_d2(nodes_[static_cast<std::size_t>(node.left)], q);
    double dr = box_d2(nodes_[static_cast<std::size_t>(node.right)], q);
    int first = node.left, second = node.right;
    if (dr < dl) std::swap(first, second);
    search(first, q, h, heap);
    search(second, q, h, heap);
  }

  Eigen::Index dim_;
  Mat keys_;                        // dim x n, column i = key of entry i
  std::vector<std::size_t> order_;  // permutation of entry ids
  std::vector<Node> nodes_;
  int root_ = -1;
};

inline void KnowledgeBase::refresh_nn_stats() {
  median_nn_distance = 0.0;
  if (entries.size() < 2) return;
  KdIndex index(*this);
  std::vector<double> nn(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto top = index.query(key(i), 2);
    nn[i] = top[0].index == i ? top[1].distance : top[0].distance;
  }
  std::size_t mid = nn.size() / 2;
  std::nth_element(nn.begin(), nn.begin() + static_cast<std::ptrdiff_t>(mid),
                   nn.end());
  median_nn_distance = nn[mid];
}

// ---------------------------------------------------------------- weights

// Minimal-norm least-squares weights for q ≈ Σ w_i key_i, solved by SVD
// (pseudoinverse semantics with the default machine-precision rank
// threshold). Rank deficiency — e.g. duplicated keys — yields the
// minimal-norm solution rather than an error.
inline Vec ls_weights(const Vec& q, const std::vector<Vec>& keys) {
  if (keys.empty()) throw ValidationError("ls_weights needs at least one key");
  Mat k_mat(q.size(), static_cast<Eigen::Index>(keys.size()));
  for (std::size_t j = 0; j < keys.size(); ++j) {
    if (keys[j].size() != q.size())
      throw ValidationError("key dimension differs from the query");
    k_mat.col(static_cast<Eigen::Index>(j)) = keys[j];
  }
  Eigen::JacobiSVD<Mat> svd(k_mat, Eigen::ComputeThinU | Eigen::ComputeThinV);
  return svd.solve(q);
}

// ---------------------------------------------------------------- combine

// Weighted combination of the stored step-v states of the given entries.
inline Vec combine_value(const KnowledgeBase& kb,
                         const std::vector<std::size_t>& indices,
                         const Vec& weights, int v_step) {
  if (v_step < 0 || static_cast<std::uint32_t>(v_step) >= kb.meta.k_step)
    throw ValidationError("v_step must satisfy 0 <= v_step < k_step");
  if (indices.empty() ||
      weights.size() != static_cast<Eigen::Index>(indices.size()))
    throw ValidationError("indices and weights must be non-empty and match");
  Vec out = Vec::Zero(static_cast<Eigen::Index>(kb.meta.dim));
  for (std::size_t i = 0; i < indices.size(); ++i)
    out += weights[static_cast<Eigen::Index>(i)] *
           kb.state_at(indices[i], static_cast<std::uint32_t>(v_step));
  return out;
}

// ---------------------------------------------------------------- binary

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k)
    out.push_back(static_cast<char>((v >> (8 * k)) & 0xffu));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int k = 0; k < 8; ++k)
    out.push_back(static_cast<char>((v >> (8 * k)) & 0xffu));
}

inline void put_i32(std::string& out, std::int32_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
}

inline void put_f64(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof bits);
  put_u64(out, bits);
}

struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size())
      throw TruncatedFileError("knowledge base file is truncated");
  }
  std::uint8_t get_u8() {
    need(1);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
  std::uint32_t get_u32() {
    need(4);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k)
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[pos++]))
           << (8 * k);
    return v;
  }
  std::uint64_t get_u64() {
    need(8);
    std::uint64_t v = 0;
    for (int k = 0; k < 8; ++k)
      v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(buf[pos++]))
           << (8 * k);
    return v;
  }
  std::int32_t get_i32() { return static_cast<std::int32_t>(get_u32()); }
  double get_f64() {
    std::uint64_t bits = get_u64();
    double d;
    std::memcpy(&d, &bits, sizeof d);
    return d;
  }
};

inline constexpr char kKbMagic[8] = {'R', 'E', 'D', 'I', 'K', 'B', '0', '1'};
inline constexpr std::uint32_t kKbVersion = 1;

}  // namespace detail

inline void save_kb(const KnowledgeBase& kb, const std::string& path) {
  std::string out;
  out.reserve(64 + kb.size() * (16 + 16 +
                                static_cast<std::size_t>(kb.meta.k_step + 1) *
                                    kb.meta.dim * 8));
  out.append(detail::kKbMagic, sizeof detail::kKbMagic);
  detail::put_u32(out, kb.meta.version);
  detail::put_u32(out, kb.meta.dim);
  detail::put_u32(out, kb.meta.n_steps);
  detail::put_u32(out, kb.meta.k_step);
  detail::put_f64(out, kb.meta.beta0);
  detail::put_f64(out, kb.meta.beta1);
  detail::put_f64(out, kb.meta.t_floor);
  out.push_back(static_cast<char>(static_cast<int>(kb.meta.method)));
  detail::put_f64(out, kb.meta.w_g);
  detail::put_u64(out, static_cast<std::uint64_t>(kb.size()));
  for (const KbEntry& e : kb.entries) {
    detail::put_i32(out, e.condition.content_id);
    detail::put_i32(out, e.condition.style_id ? *e.condition.style_id : -1);
    detail::put_u64(out, e.seed);
    for (Eigen::Index i = 0; i < e.suffix.size(); ++i)
      detail::put_f64(out, e.suffix[i]);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed: " + path);
}

// Load a knowledge base. When expected_dim > 0, a differing stored dim is
// a DimMismatchError. Bad magic, unsupported version, and short files each
// raise their own error type.
inline KnowledgeBase load_kb(const std::string& path, int expected_dim = 0) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  if (buf.size() < sizeof detail::kKbMagic)
    throw TruncatedFileError("knowledge base file is truncated");
  if (std::memcmp(buf.data(), detail::kKbMagic, sizeof detail::kKbMagic) != 0)
    throw BadMagicError("not a knowledge base file (bad magic)");

  detail::ByteReader r{buf, sizeof detail::kKbMagic};
  KnowledgeBase kb;
  kb.meta.version = r.get_u32();
  if (kb.meta.version != detail::kKbVersion)
    throw VersionMismatchError("unsupported knowledge base version " +
                               std::to_string(kb.meta.version));
  kb.meta.dim = r.get_u32();
  kb.meta.n_steps = r.get_u32();
  kb.meta.k_step = r.get_u32();
  kb.meta.beta0 = r.get_f64();
  kb.meta.beta1 = r.get_f64();
  kb.meta.t_floor = r.get_f64();
  std::uint8_t method_id = r.get_u8();
  if (method_id > 3) throw IoError("corrupt solver id in knowledge base");
  kb.meta.method = static_cast<Method>(method_id);
  kb.meta.w_g = r.get_f64();
  if (kb.meta.dim == 0 || kb.meta.k_step >= kb.meta.n_steps)
    throw IoError("corrupt knowledge base header");
  if (expected_dim > 0 &&
      kb.meta.dim != static_cast<std::uint32_t>(expected_dim))
    throw DimMismatchError("knowledge base dim " +
                           std::to_string(kb.meta.dim) +
                           " differs from expected " +
                           std::to_string(expected_dim));

  std::uint64_t count = r.get_u64();
  const Eigen::Index suffix_len =
      static_cast<Eigen::Index>((kb.meta.k_step + 1) * kb.meta.dim);
  kb.entries.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    KbEntry e;
    e.condition.content_id = r.get_i32();
    std::int32_t style = r.get_i32();
    e.condition.style_id =
        style < 0 ? std::nullopt : std::optional<int>(style);
    e.seed = r.get_u64();
    e.suffix.resize(suffix_len);
    for (Eigen::Index j = 0; j < suffix_len; ++j) e.suffix[j] = r.get_f64();
    kb.entries.push_back(std::move(e));
  }
  if (r.pos != buf.size())
    throw IoError("trailing bytes after the last knowledge base entry");
  kb.refresh_nn_stats();
  return kb;
}

}  // namespace redi
