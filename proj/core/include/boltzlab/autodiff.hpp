#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace boltzlab::ad {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Node kinds recorded on the tape.
enum class Op : std::uint8_t {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kScale,
  kShift,
  kExp,
  kLog,
  kTanh,
  kCelu,
  kSquare,
  kRelu,
  kMax,
  kSum,
  kRowSum,
  kMatMul,
  kGatherCols,
  kMergeCols,
  kElement,
  kLogSumExp,
  kDetach,
};

std::string_view op_name(Op op);

/// Raised when a forward evaluation would record an invalid node. The node id
/// is the index the offending node would have occupied on the tape.
class TapeError : public std::runtime_error {
 public:
  enum class Kind { kDomain, kNonFinite, kShape, kUsage };

  TapeError(Kind kind, std::size_t node, const std::string& what);

  Kind kind() const noexcept { return kind_; }
  std::size_t node() const noexcept { return node_; }

 private:
  Kind kind_;
  std::size_t node_;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  std::size_t id() const noexcept { return id_; }
  Tape& tape() const;

  const Matrix& value() const;
  /// Value of a 1x1 node.
  double scalar() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Append-only reverse-mode graph over dense matrices. Scalars are 1x1.
///
/// Every node's parents precede it, so a reverse sweep in index order is a
/// valid topological traversal. A tape is rebuilt for every training step and
/// is not thread-safe; independent tapes can be used from different threads.
class Tape {
 public:
  static constexpr std::size_t kNoParent = std::numeric_limits<std::size_t>::max();

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that receives gradients.
  Var parameter(Matrix value);
  Var parameter(double value);
  /// Leaf treated as a constant by every backward pass.
  Var constant(Matrix value);
  Var constant(double value);

  std::size_t size() const noexcept { return nodes_.size(); }
  Op op(std::size_t id) const { return nodes_.at(id).op; }
  std::array<std::size_t, 2> parents(std::size_t id) const { return nodes_.at(id).parents; }
  const Matrix& value(std::size_t id) const { return nodes_.at(id).value; }
  /// True when some parameter leaf is reachable upstream of the node.
  bool requires_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }

  /// Adjoints of `wrt` for the scalar `root`. Leaves not reached get zeros.
  std::vector<Matrix> gradients(Var root, std::span<const Var> wrt) const;
  /// Same, with an explicit seed for a non-scalar root (vector-Jacobian product).
  std::vector<Matrix> gradients_seeded(Var root, const Matrix& seed, std::span<const Var> wrt) const;

  /// Gradient of a scalar root flattened over `wrt`, each matrix column-major.
  Eigen::VectorXd gradient(Var root, std::span<const Var> wrt) const;
  Eigen::VectorXd gradient_seeded(Var root, const Matrix& seed, std::span<const Var> wrt) const;

  // Internal recording entry point used by the operator functions.
  Var record(Op op, std::size_t a, std::size_t b, Matrix value, double param = 0.0,
             std::vector<Index> indices = {}, std::vector<Index> indices_b = {});

 private:
  struct Node {
    Op op = Op::kConstant;
    std::array<std::size_t, 2> parents{kNoParent, kNoParent};
    double param = 0.0;
    bool needs_grad = false;
    Matrix value;
    std::vector<Index> indices;
    std::vector<Index> indices_b;
  };

  void backward_sweep(std::size_t root, const Matrix& seed, std::vector<Matrix>& adjoint) const;

  std::vector<Node> nodes_;
};

// Elementwise arithmetic. Binary operands must have equal shapes or broadcast:
// a 1x1 operand, a 1xc row or an rx1 column is replicated to the other shape.
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator-(Var a);
Var operator*(double c, Var a);
Var operator*(Var a, double c);
Var operator/(Var a, double c);
Var operator+(Var a, double c);
Var operator+(double c, Var a);
Var operator-(Var a, double c);
Var operator-(double c, Var a);

Var exp(Var a);
/// Domain error on any entry <= 0.
Var log(Var a);
Var tanh(Var a);
/// celu(x) = x for x >= 0, alpha * (exp(x / alpha) - 1) otherwise.
Var celu(Var a, double alpha = 1.0);
Var square(Var a);
/// Positive part max(x, 0); its derivative is the mask 1[x > 0].
Var relu(Var a);
/// Elementwise maximum; ties route the gradient to `a`.
Var max(Var a, Var b);

/// Sum of all entries, 1x1.
Var sum(Var a);
/// Mean of all entries, 1x1.
Var mean(Var a);
/// Per-row sums, rx1.
Var row_sum(Var a);
/// log(sum(exp(a))) over all entries, evaluated stably, 1x1.
Var logsumexp(Var a);

Var matmul(Var a, Var b);
/// Columns `cols` of `a`, in the given order.
Var gather_cols(Var a, std::vector<Index> cols);
/// Matrix whose columns `cols_a` come from `a` and `cols_b` from `b`.
Var merge_cols(Var a, std::vector<Index> cols_a, Var b, std::vector<Index> cols_b);
/// Entry (row, col) as a 1x1 node.
Var element(Var a, Index row, Index col = 0);

/// Same value; backward treats the result as a constant.
Var detach(Var a);

/// Gradient of a scalar root flattened over `params`.
Eigen::VectorXd backward(Var root, std::span<const Var> params);

/// One gradient row per scalar root. Row j equals backward(roots[j], params);
/// the cost is one reverse sweep per root.
Eigen::MatrixXd per_sample_gradients(std::span<const Var> roots, std::span<const Var> params);
/// Per-entry gradients of an rx1 column root, one row per entry.
Eigen::MatrixXd per_sample_gradients(Var column, std::span<const Var> params);

/// Total number of scalars across `params`.
Index flat_size(std::span<const Var> params);

}  // namespace boltzlab::ad
