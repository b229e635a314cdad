#pragma once

// Input/output maps between measurement space (N) and hidden space (L).
//
// Three interchangeable families:
//   Group       one W shared by every subject
//   Subject     one W_i per subject
//   Decomposed  W_i = V · diag(s_i) · Uᵀ with V (N×L) and U (L×L) shared and
//               only the row s_i owned by subject i
//
// An encoder-side map goes N → L, a decoder-side map goes L → N. For the
// decoder the decomposed factorization is transposed, W_i = U · diag(s_i) · Vᵀ,
// so U is always the L×L factor and the one kept orthonormal.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "subjmap/errors.hpp"
#include "subjmap/linalg.hpp"
#include "subjmap/rng.hpp"

namespace subjmap {

using SubjectIndex = std::uint32_t;

enum class LayerVariant { Group, Subject, Decomposed };
enum class MapSide { Encoder, Decoder };

inline std::string_view to_string(LayerVariant v) {
  switch (v) {
    case LayerVariant::Group: return "group";
    case LayerVariant::Subject: return "subject";
    case LayerVariant::Decomposed: return "decomposed";
  }
  return "?";
}

inline LayerVariant parse_variant(std::string_view s) {
  if (s == "group") return LayerVariant::Group;
  if (s == "subject") return LayerVariant::Subject;
  if (s == "decomposed") return LayerVariant::Decomposed;
  throw ConfigError("unknown layer variant '" + std::string(s) + "'");
}

struct GroupMap {
  MapSide side = MapSide::Encoder;
  std::size_t n_subjects = 0;
  Matrix weight;  // in × out
  Matrix bias;    // 1 × out
};

struct SubjectMap {
  MapSide side = MapSide::Encoder;
  std::vector<Matrix> weights;  // one in × out matrix per subject
  Matrix bias;                  // 1 × out, shared
};

struct DecomposedMap {
  MapSide side = MapSide::Encoder;
  Matrix voxel_basis;   // V, N × L
  Matrix hidden_basis;  // U, L × L, orthonormal
  Matrix singular;      // s, M × L, row i belongs to subject i
  Matrix bias;          // 1 × out, shared

  const Matrix& in_basis() const { return side == MapSide::Encoder ? voxel_basis : hidden_basis; }
  const Matrix& out_basis() const { return side == MapSide::Encoder ? hidden_basis : voxel_basis; }
};

using SubjectLayer = std::variant<GroupMap, SubjectMap, DecomposedMap>;

inline LayerVariant variant_of(const SubjectLayer& layer) {
  return static_cast<LayerVariant>(layer.index());
}

inline std::size_t in_size(const SubjectLayer& layer) {
  return std::visit(
      [](const auto& m) -> std::size_t {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, GroupMap>) return m.weight.rows();
        else if constexpr (std::is_same_v<T, SubjectMap>) return m.weights.empty() ? 0 : m.weights[0].rows();
        else return m.in_basis().rows();
      },
      layer);
}

inline std::size_t out_size(const SubjectLayer& layer) {
  return std::visit([](const auto& m) -> std::size_t { return m.bias.cols(); }, layer);
}

inline std::size_t subject_count(const SubjectLayer& layer) {
  return std::visit(
      [](const auto& m) -> std::size_t {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, GroupMap>) return m.n_subjects;
        else if constexpr (std::is_same_v<T, SubjectMap>) return m.weights.size();
        else return m.singular.rows();
      },
      layer);
}

/// Glorot-uniform bound sqrt(6 / (fan_in + fan_out)).
inline double glorot_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

/// Fresh map of the given family. `input_size` is N and `hidden` is L
/// regardless of side. Subject maps start with one shared draw copied to
/// every subject; decomposed maps start with s = 1 so every subject begins
/// at the shared map.
inline SubjectLayer make_subject_layer(LayerVariant variant, MapSide side, std::size_t input_size,
                                       std::size_t hidden, std::size_t n_subjects, SeededRng& rng) {
  const std::size_t in = side == MapSide::Encoder ? input_size : hidden;
  const std::size_t out = side == MapSide::Encoder ? hidden : input_size;
  const double a = glorot_bound(input_size, hidden);
  switch (variant) {
    case LayerVariant::Group:
      return GroupMap{side, n_subjects, Matrix::uniform(in, out, rng, -a, a), Matrix(1, out)};
    case LayerVariant::Subject: {
      const Matrix w = Matrix::uniform(in, out, rng, -a, a);
      return SubjectMap{side, std::vector<Matrix>(n_subjects, w), Matrix(1, out)};
    }
    case LayerVariant::Decomposed: {
      Matrix v = Matrix::uniform(input_size, hidden, rng, -a, a);
      Matrix u = qr_orthonormalize(Matrix::gaussian(hidden, hidden, rng));
      return DecomposedMap{side, std::move(v), std::move(u), Matrix(n_subjects, hidden, 1.0),
                           Matrix(1, out)};
    }
  }
  throw ConfigError("unknown layer variant");
}

namespace detail {

inline void check_inputs(const SubjectLayer& layer, const Matrix& x,
                         std::span<const SubjectIndex> ids) {
  if (x.cols() != in_size(layer))
    throw ShapeError("input width " + std::to_string(x.cols()) + " but map expects " +
                     std::to_string(in_size(layer)));
  if (ids.size() != x.rows())
    throw ShapeError(std::to_string(ids.size()) + " subject ids for " + std::to_string(x.rows()) +
                     " rows");
  const std::size_t m = subject_count(layer);
  for (SubjectIndex id : ids)
    if (id >= m)
      throw UnknownSubject("subject index " + std::to_string(id) + " but map holds " +
                           std::to_string(m));
}

// Rows of s gathered per batch row.
inline Matrix gather_rows(const Matrix& table, std::span<const SubjectIndex> ids) {
  Matrix out(ids.size(), table.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    auto src = table.row(ids[r]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

}  // namespace detail

/// y = x · W_{id(t)} + b, row by row.
inline Matrix forward(const SubjectLayer& layer, const Matrix& x,
                      std::span<const SubjectIndex> ids) {
  detail::check_inputs(layer, x, ids);
  return std::visit(
      [&](const auto& m) -> Matrix {
        using T = std::decay_t<decltype(m)>;
        Matrix y;
        if constexpr (std::is_same_v<T, GroupMap>) {
          y = matmul(x, m.weight);
        } else if constexpr (std::is_same_v<T, SubjectMap>) {
          const std::size_t in = x.cols();
          const std::size_t out = m.bias.cols();
          y = Matrix(x.rows(), out);
          for (std::size_t r = 0; r < x.rows(); ++r) {
            const Matrix& w = m.weights[ids[r]];
            auto xr = x.row(r);
            auto yr = y.row(r);
            for (std::size_t i = 0; i < in; ++i) {
              const double xi = xr[i];
              auto wi = w.row(i);
              for (std::size_t j = 0; j < out; ++j) yr[j] += xi * wi[j];
            }
          }
        } else {
          const Matrix projected = matmul(x, m.in_basis());
          const Matrix scaled = hadamard(projected, detail::gather_rows(m.singular, ids));
          y = matmul_nt(scaled, m.out_basis());
        }
        add_row_vector(y, m.bias);
        return y;
      },
      layer);
}

struct LayerGradients {
  Matrix input;          // ∂loss/∂x
  SubjectLayer params;   // same family and shapes as the map
};

/// Exact gradients of a forward pass given ∂loss/∂y.
inline LayerGradients backward(const SubjectLayer& layer, const Matrix& x,
                               std::span<const SubjectIndex> ids, const Matrix& grad_out) {
  detail::check_inputs(layer, x, ids);
  if (grad_out.rows() != x.rows() || grad_out.cols() != out_size(layer))
    throw ShapeError("grad_out " + grad_out.shape_string() + " does not match forward output");
  return std::visit(
      [&](const auto& m) -> LayerGradients {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, GroupMap>) {
          GroupMap g{m.side, m.n_subjects, matmul_tn(x, grad_out), column_sums(grad_out)};
          return {matmul_nt(grad_out, m.weight), std::move(g)};
        } else if constexpr (std::is_same_v<T, SubjectMap>) {
          const std::size_t in = x.cols();
          const std::size_t out = m.bias.cols();
          SubjectMap g{m.side, std::vector<Matrix>(m.weights.size(), Matrix(in, out)),
                       column_sums(grad_out)};
          Matrix gx(x.rows(), in);
          for (std::size_t r = 0; r < x.rows(); ++r) {
            const Matrix& w = m.weights[ids[r]];
            Matrix& gw = g.weights[ids[r]];
            auto xr = x.row(r);
            auto gr = grad_out.row(r);
            auto gxr = gx.row(r);
            for (std::size_t i = 0; i < in; ++i) {
              auto wi = w.row(i);
              auto gwi = gw.row(i);
              double acc = 0.0;
              for (std::size_t j = 0; j < out; ++j) {
                gwi[j] += xr[i] * gr[j];
                acc += gr[j] * wi[j];
              }
              gxr[i] = acc;
            }
          }
          return {std::move(gx), std::move(g)};
        } else {
          const Matrix projected = matmul(x, m.in_basis());
          const Matrix rows_s = detail::gather_rows(m.singular, ids);
          const Matrix scaled = hadamard(projected, rows_s);
          const Matrix grad_out_basis = matmul_tn(grad_out, scaled);
          const Matrix grad_scaled = matmul(grad_out, m.out_basis());
          Matrix grad_s(m.singular.rows(), m.singular.cols());
          for (std::size_t r = 0; r < x.rows(); ++r) {
            auto dst = grad_s.row(ids[r]);
            auto gs = grad_scaled.row(r);
            auto p = projected.row(r);
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += gs[j] * p[j];
          }
          const Matrix grad_projected = hadamard(grad_scaled, rows_s);
          const Matrix grad_in_basis = matmul_tn(x, grad_projected);
          Matrix gx = matmul_nt(grad_projected, m.in_basis());
          DecomposedMap g{m.side, Matrix(), Matrix(), std::move(grad_s), column_sums(grad_out)};
          if (m.side == MapSide::Encoder) {
            g.voxel_basis = grad_in_basis;
            g.hidden_basis = grad_out_basis;
          } else {
            g.hidden_basis = grad_in_basis;
            g.voxel_basis = grad_out_basis;
          }
          return {std::move(gx), std::move(g)};
        }
      },
      layer);
}

/// Visits every parameter tensor with a stable name, in a fixed order.
template <typename Layer, typename Fn>
  requires std::is_same_v<std::remove_const_t<Layer>, SubjectLayer>
void for_each_param(Layer& layer, std::string_view prefix, Fn&& fn) {
  const std::string p(prefix);
  std::visit(
      [&](auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, GroupMap>) {
          fn(p + ".weight", m.weight);
        } else if constexpr (std::is_same_v<T, SubjectMap>) {
          for (std::size_t i = 0; i < m.weights.size(); ++i)
            fn(p + ".weight." + std::to_string(i), m.weights[i]);
        } else {
          fn(p + ".V", m.voxel_basis);
          fn(p + ".U", m.hidden_basis);
          fn(p + ".s", m.singular);
        }
        fn(p + ".bias", m.bias);
      },
      layer);
}

/// Appends `count` subjects initialized to the mean of the existing ones.
inline void append_subjects(SubjectLayer& layer, std::size_t count) {
  std::visit(
      [&](auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, GroupMap>) {
          m.n_subjects += count;
        } else if constexpr (std::is_same_v<T, SubjectMap>) {
          if (m.weights.empty()) throw ShapeError("cannot append to an empty subject map");
          Matrix mean(m.weights[0].rows(), m.weights[0].cols());
          for (const auto& w : m.weights) mean += w;
          mean *= 1.0 / static_cast<double>(m.weights.size());
          for (std::size_t i = 0; i < count; ++i) m.weights.push_back(mean);
        } else {
          const std::size_t old = m.singular.rows();
          const Matrix mean = old ? column_means(m.singular) : Matrix(1, m.singular.cols(), 1.0);
          Matrix grown(old + count, m.singular.cols());
          std::copy(m.singular.values().begin(), m.singular.values().end(), grown.values().begin());
          for (std::size_t i = old; i < old + count; ++i)
            std::copy(mean.values().begin(), mean.values().end(), grown.row(i).begin());
          m.singular = std::move(grown);
        }
      },
      layer);
}

/// Dense W_i (in × out) that the map applies for one subject.
inline Matrix effective_weight(const SubjectLayer& layer, SubjectIndex id) {
  if (id >= subject_count(layer)) throw UnknownSubject("subject index " + std::to_string(id));
  return std::visit(
      [&](const auto& m) -> Matrix {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, GroupMap>) return m.weight;
        else if constexpr (std::is_same_v<T, SubjectMap>) return m.weights[id];
        else {
          Matrix scaled = m.in_basis();
          for (std::size_t r = 0; r < scaled.rows(); ++r)
            for (std::size_t c = 0; c < scaled.cols(); ++c) scaled(r, c) *= m.singular(id, c);
          return matmul_nt(scaled, m.out_basis());
        }
      },
      layer);
}

/// Re-projects U onto the orthonormal matrices. No-op for other families.
inline void reorthonormalize(SubjectLayer& layer) {
  if (auto* d = std::get_if<DecomposedMap>(&layer)) d->hidden_basis = qr_orthonormalize(d->hidden_basis);
}

/// max |UᵀU − I| for a decomposed map, 0 otherwise.
inline double orthogonality_error(const SubjectLayer& layer) {
  const auto* d = std::get_if<DecomposedMap>(&layer);
  if (!d) return 0.0;
  const Matrix gram = matmul_tn(d->hidden_basis, d->hidden_basis);
  return max_abs_diff(gram, Matrix::identity(gram.rows()));
}

struct ParamRegime {
  std::uint64_t input_size;   // IS
  std::uint64_t hidden_size;  // HS
  std::uint64_t n_subjects;   // NS
};

/// Weights of one map, biases excluded:
///   Subject     IS·HS·NS
///   Group       IS·HS
///   Decomposed  IS·HS + HS·HS + HS·NS
inline std::uint64_t param_count(LayerVariant variant, const ParamRegime& r) {
  if (r.input_size == 0 || r.hidden_size == 0 || r.n_subjects == 0)
    throw DimensionError("parameter regime entries must be positive");
  switch (variant) {
    case LayerVariant::Subject: return r.input_size * r.hidden_size * r.n_subjects;
    case LayerVariant::Group: return r.input_size * r.hidden_size;
    case LayerVariant::Decomposed:
      return r.input_size * r.hidden_size + r.hidden_size * r.hidden_size +
             r.hidden_size * r.n_subjects;
  }
  return 0;
}

}  // namespace subjmap
