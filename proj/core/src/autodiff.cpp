#include "boltzlab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include <fmt/format.h>

namespace boltzlab::ad {

std::string_view op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConstant: return "constant";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kNeg: return "neg";
    case Op::kScale: return "scale";
    case Op::kShift: return "shift";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kTanh: return "tanh";
    case Op::kCelu: return "celu";
    case Op::kSquare: return "square";
    case Op::kRelu: return "relu";
    case Op::kMax: return "max";
    case Op::kSum: return "sum";
    case Op::kRowSum: return "row_sum";
    case Op::kMatMul: return "matmul";
    case Op::kGatherCols: return "gather_cols";
    case Op::kMergeCols: return "merge_cols";
    case Op::kElement: return "element";
    case Op::kLogSumExp: return "logsumexp";
    case Op::kDetach: return "detach";
  }
  return "unknown";
}

TapeError::TapeError(Kind kind, std::size_t node, const std::string& what)
    : std::runtime_error(what), kind_(kind), node_(node) {}

Tape& Var::tape() const {
  if (tape_ == nullptr) {
    throw TapeError(TapeError::Kind::kUsage, 0, "use of an unbound Var");
  }
  return *tape_;
}

const Matrix& Var::value() const { return tape().value(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) {
    throw TapeError(TapeError::Kind::kShape, id_,
                    fmt::format("node {} is {}x{}, not a scalar", id_, v.rows(), v.cols()));
  }
  return v(0, 0);
}

namespace {

Matrix expand(const Matrix& m, Index rows, Index cols) {
  if (m.rows() == rows && m.cols() == cols) {
    return m;
  }
  return m.replicate(rows / m.rows(), cols / m.cols());
}

// Sums an adjoint over the axes along which an operand was broadcast.
Matrix reduce_to(const Matrix& adj, Index rows, Index cols) {
  if (adj.rows() == rows && adj.cols() == cols) {
    return adj;
  }
  Matrix out = adj;
  if (rows == 1 && out.rows() != 1) {
    out = out.colwise().sum().eval();
  }
  if (cols == 1 && out.cols() != 1) {
    out = out.rowwise().sum().eval();
  }
  return out;
}

Index broadcast_dim(Index a, Index b) {
  if (a == b || b == 1) {
    return a;
  }
  if (a == 1) {
    return b;
  }
  return -1;
}

void accumulate(std::vector<Matrix>& adjoint, std::size_t id, const Matrix& contribution) {
  if (adjoint[id].size() == 0) {
    adjoint[id] = contribution;
  } else {
    adjoint[id] += contribution;
  }
}

Tape& common_tape(Var a, Var b) {
  Tape& t = a.tape();
  if (&t != &b.tape()) {
    throw TapeError(TapeError::Kind::kUsage, t.size(), "operands live on different tapes");
  }
  return t;
}

Var binary(Op op, Var a, Var b) {
  Tape& t = common_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const Index rows = broadcast_dim(av.rows(), bv.rows());
  const Index cols = broadcast_dim(av.cols(), bv.cols());
  if (rows < 0 || cols < 0) {
    throw TapeError(TapeError::Kind::kShape, t.size(),
                    fmt::format("{}: cannot broadcast {}x{} with {}x{}", op_name(op), av.rows(),
                                av.cols(), bv.rows(), bv.cols()));
  }
  const Matrix ae = expand(av, rows, cols);
  const Matrix be = expand(bv, rows, cols);
  Matrix out;
  switch (op) {
    case Op::kAdd: out = ae + be; break;
    case Op::kSub: out = ae - be; break;
    case Op::kMul: out = ae.cwiseProduct(be); break;
    case Op::kDiv:
      if ((be.array() == 0.0).any()) {
        throw TapeError(TapeError::Kind::kDomain, t.size(),
                        fmt::format("div: zero denominator at node {}", t.size()));
      }
      out = ae.cwiseQuotient(be);
      break;
    case Op::kMax: out = ae.cwiseMax(be); break;
    default: throw TapeError(TapeError::Kind::kUsage, t.size(), "not a binary op");
  }
  return t.record(op, a.id(), b.id(), std::move(out));
}

Var unary(Op op, Var a, Matrix out, double param = 0.0) {
  return a.tape().record(op, a.id(), Tape::kNoParent, std::move(out), param);
}

}  // namespace

Var Tape::parameter(Matrix value) { return record(Op::kLeaf, kNoParent, kNoParent, std::move(value)); }

Var Tape::parameter(double value) { return parameter(Matrix::Constant(1, 1, value)); }

Var Tape::constant(Matrix value) { return record(Op::kConstant, kNoParent, kNoParent, std::move(value)); }

Var Tape::constant(double value) { return constant(Matrix::Constant(1, 1, value)); }

Var Tape::record(Op op, std::size_t a, std::size_t b, Matrix value, double param, std::vector<Index> indices,
                 std::vector<Index> indices_b) {
  const std::size_t id = nodes_.size();
  if (!value.allFinite()) {
    throw TapeError(TapeError::Kind::kNonFinite, id,
                    fmt::format("{}: non-finite value at node {}", op_name(op), id));
  }
  Node node;
  node.op = op;
  node.parents = {a, b};
  node.param = param;
  node.value = std::move(value);
  node.indices = std::move(indices);
  node.indices_b = std::move(indices_b);
  if (op == Op::kLeaf) {
    node.needs_grad = true;
  } else if (op != Op::kConstant && op != Op::kDetach) {
    node.needs_grad = (a != kNoParent && nodes_[a].needs_grad) || (b != kNoParent && nodes_[b].needs_grad);
  }
  nodes_.push_back(std::move(node));
  return Var(this, id);
}

void Tape::backward_sweep(std::size_t root, const Matrix& seed, std::vector<Matrix>& adjoint) const {
  adjoint.assign(root + 1, Matrix());
  adjoint[root] = seed;
  for (std::size_t i = root + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (!n.needs_grad || adjoint[i].size() == 0 || n.op == Op::kLeaf) {
      continue;
    }
    const Matrix& g = adjoint[i];
    const std::size_t pa = n.parents[0];
    const std::size_t pb = n.parents[1];
    const bool ga = pa != kNoParent && nodes_[pa].needs_grad;
    const bool gb = pb != kNoParent && nodes_[pb].needs_grad;
    const Matrix* av = pa != kNoParent ? &nodes_[pa].value : nullptr;
    const Matrix* bv = pb != kNoParent ? &nodes_[pb].value : nullptr;
    const Index rows = n.value.rows();
    const Index cols = n.value.cols();

    switch (n.op) {
      case Op::kAdd:
        if (ga) accumulate(adjoint, pa, reduce_to(g, av->rows(), av->cols()));
        if (gb) accumulate(adjoint, pb, reduce_to(g, bv->rows(), bv->cols()));
        break;
      case Op::kSub:
        if (ga) accumulate(adjoint, pa, reduce_to(g, av->rows(), av->cols()));
        if (gb) accumulate(adjoint, pb, reduce_to(-g, bv->rows(), bv->cols()));
        break;
      case Op::kMul:
        if (ga) accumulate(adjoint, pa, reduce_to(g.cwiseProduct(expand(*bv, rows, cols)), av->rows(), av->cols()));
        if (gb) accumulate(adjoint, pb, reduce_to(g.cwiseProduct(expand(*av, rows, cols)), bv->rows(), bv->cols()));
        break;
      case Op::kDiv: {
        const Matrix be = expand(*bv, rows, cols);
        if (ga) accumulate(adjoint, pa, reduce_to(g.cwiseQuotient(be), av->rows(), av->cols()));
        if (gb) {
          const Matrix local = -n.value.cwiseQuotient(be);
          accumulate(adjoint, pb, reduce_to(g.cwiseProduct(local), bv->rows(), bv->cols()));
        }
        break;
      }
      case Op::kMax: {
        const Matrix ae = expand(*av, rows, cols);
        const Matrix be = expand(*bv, rows, cols);
        const Matrix mask_a = (ae.array() >= be.array()).cast<double>().matrix();
        if (ga) accumulate(adjoint, pa, reduce_to(g.cwiseProduct(mask_a), av->rows(), av->cols()));
        if (gb) {
          const Matrix mask_b = Matrix::Ones(rows, cols) - mask_a;
          accumulate(adjoint, pb, reduce_to(g.cwiseProduct(mask_b), bv->rows(), bv->cols()));
        }
        break;
      }
      case Op::kNeg: accumulate(adjoint, pa, -g); break;
      case Op::kScale: accumulate(adjoint, pa, n.param * g); break;
      case Op::kShift: accumulate(adjoint, pa, g); break;
      case Op::kDetach: break;
      case Op::kExp: accumulate(adjoint, pa, g.cwiseProduct(n.value)); break;
      case Op::kLog: accumulate(adjoint, pa, g.cwiseQuotient(*av)); break;
      case Op::kTanh:
        accumulate(adjoint, pa, (g.array() * (1.0 - n.value.array().square())).matrix());
        break;
      case Op::kCelu: {
        const double alpha = n.param;
        const Matrix local = av->unaryExpr([alpha](double x) { return x >= 0.0 ? 1.0 : std::exp(x / alpha); });
        accumulate(adjoint, pa, g.cwiseProduct(local));
        break;
      }
      case Op::kSquare: accumulate(adjoint, pa, (2.0 * g.array() * av->array()).matrix()); break;
      case Op::kRelu:
        accumulate(adjoint, pa, (g.array() * (av->array() > 0.0).cast<double>()).matrix());
        break;
      case Op::kSum: accumulate(adjoint, pa, Matrix::Constant(av->rows(), av->cols(), g(0, 0))); break;
      case Op::kRowSum: accumulate(adjoint, pa, g.replicate(1, av->cols())); break;
      case Op::kLogSumExp: {
        const double lse = n.value(0, 0);
        accumulate(adjoint, pa, (g(0, 0) * (av->array() - lse).exp()).matrix());
        break;
      }
      case Op::kMatMul:
        if (ga) accumulate(adjoint, pa, g * bv->transpose());
        if (gb) accumulate(adjoint, pb, av->transpose() * g);
        break;
      case Op::kGatherCols: {
        Matrix local = Matrix::Zero(av->rows(), av->cols());
        for (std::size_t k = 0; k < n.indices.size(); ++k) {
          local.col(n.indices[k]) += g.col(static_cast<Index>(k));
        }
        accumulate(adjoint, pa, local);
        break;
      }
      case Op::kMergeCols: {
        if (ga) {
          Matrix local(rows, static_cast<Index>(n.indices.size()));
          for (std::size_t k = 0; k < n.indices.size(); ++k) {
            local.col(static_cast<Index>(k)) = g.col(n.indices[k]);
          }
          accumulate(adjoint, pa, local);
        }
        if (gb) {
          Matrix local(rows, static_cast<Index>(n.indices_b.size()));
          for (std::size_t k = 0; k < n.indices_b.size(); ++k) {
            local.col(static_cast<Index>(k)) = g.col(n.indices_b[k]);
          }
          accumulate(adjoint, pb, local);
        }
        break;
      }
      case Op::kElement: {
        Matrix local = Matrix::Zero(av->rows(), av->cols());
        local(n.indices[0], n.indices[1]) = g(0, 0);
        accumulate(adjoint, pa, local);
        break;
      }
      case Op::kLeaf:
      case Op::kConstant:
        break;
    }
  }
}

std::vector<Matrix> Tape::gradients_seeded(Var root, const Matrix& seed, std::span<const Var> wrt) const {
  if (&root.tape() != this) {
    throw TapeError(TapeError::Kind::kUsage, root.id(), "root belongs to another tape");
  }
  const Matrix& rv = root.value();
  if (seed.rows() != rv.rows() || seed.cols() != rv.cols()) {
    throw TapeError(TapeError::Kind::kShape, root.id(), "seed shape does not match root");
  }
  std::vector<Matrix> adjoint;
  backward_sweep(root.id(), seed, adjoint);
  std::vector<Matrix> out;
  out.reserve(wrt.size());
  for (const Var& v : wrt) {
    if (v.id() < adjoint.size() && adjoint[v.id()].size() != 0) {
      out.push_back(adjoint[v.id()]);
    } else {
      out.push_back(Matrix::Zero(v.rows(), v.cols()));
    }
  }
  return out;
}

std::vector<Matrix> Tape::gradients(Var root, std::span<const Var> wrt) const {
  const Matrix& rv = root.value();
  if (rv.rows() != 1 || rv.cols() != 1) {
    throw TapeError(TapeError::Kind::kShape, root.id(),
                    fmt::format("backward needs a scalar root, node {} is {}x{}", root.id(), rv.rows(), rv.cols()));
  }
  return gradients_seeded(root, Matrix::Ones(1, 1), wrt);
}

namespace {

Eigen::VectorXd flatten(const std::vector<Matrix>& parts) {
  Index total = 0;
  for (const Matrix& m : parts) {
    total += m.size();
  }
  Eigen::VectorXd flat(total);
  Index offset = 0;
  for (const Matrix& m : parts) {
    flat.segment(offset, m.size()) = Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
    offset += m.size();
  }
  return flat;
}

}  // namespace

Eigen::VectorXd Tape::gradient(Var root, std::span<const Var> wrt) const { return flatten(gradients(root, wrt)); }

Eigen::VectorXd Tape::gradient_seeded(Var root, const Matrix& seed, std::span<const Var> wrt) const {
  return flatten(gradients_seeded(root, seed, wrt));
}

Var operator+(Var a, Var b) { return binary(Op::kAdd, a, b); }
Var operator-(Var a, Var b) { return binary(Op::kSub, a, b); }
Var operator*(Var a, Var b) { return binary(Op::kMul, a, b); }
Var operator/(Var a, Var b) { return binary(Op::kDiv, a, b); }
Var max(Var a, Var b) { return binary(Op::kMax, a, b); }

Var operator-(Var a) { return unary(Op::kNeg, a, -a.value()); }
Var operator*(double c, Var a) { return unary(Op::kScale, a, c * a.value(), c); }
Var operator*(Var a, double c) { return c * a; }
Var operator/(Var a, double c) {
  if (c == 0.0) {
    throw TapeError(TapeError::Kind::kDomain, a.tape().size(), "div: zero denominator");
  }
  return (1.0 / c) * a;
}
Var operator+(Var a, double c) {
  return unary(Op::kShift, a, (a.value().array() + c).matrix(), c);
}
Var operator+(double c, Var a) { return a + c; }
Var operator-(Var a, double c) { return a + (-c); }
Var operator-(double c, Var a) { return (-a) + c; }

Var exp(Var a) { return unary(Op::kExp, a, a.value().array().exp().matrix()); }

Var log(Var a) {
  const Matrix& v = a.value();
  if ((v.array() <= 0.0).any()) {
    const std::size_t id = a.tape().size();
    throw TapeError(TapeError::Kind::kDomain, id, fmt::format("log: non-positive input at node {}", id));
  }
  return unary(Op::kLog, a, v.array().log().matrix());
}

Var tanh(Var a) { return unary(Op::kTanh, a, a.value().array().tanh().matrix()); }

Var celu(Var a, double alpha) {
  if (!(alpha > 0.0)) {
    throw TapeError(TapeError::Kind::kUsage, a.tape().size(), "celu: alpha must be positive");
  }
  Matrix out = a.value().unaryExpr([alpha](double x) { return x >= 0.0 ? x : alpha * std::expm1(x / alpha); });
  return unary(Op::kCelu, a, std::move(out), alpha);
}

Var square(Var a) { return unary(Op::kSquare, a, a.value().array().square().matrix()); }

Var relu(Var a) { return unary(Op::kRelu, a, a.value().cwiseMax(0.0)); }

Var sum(Var a) { return unary(Op::kSum, a, Matrix::Constant(1, 1, a.value().sum())); }

Var mean(Var a) { return sum(a) * (1.0 / static_cast<double>(a.value().size())); }

Var row_sum(Var a) { return unary(Op::kRowSum, a, a.value().rowwise().sum()); }

Var logsumexp(Var a) {
  const Matrix& v = a.value();
  const double m = v.maxCoeff();
  const double lse = m + std::log((v.array() - m).exp().sum());
  return unary(Op::kLogSumExp, a, Matrix::Constant(1, 1, lse));
}

Var matmul(Var a, Var b) {
  Tape& t = common_tape(a, b);
  if (a.cols() != b.rows()) {
    throw TapeError(TapeError::Kind::kShape, t.size(),
                    fmt::format("matmul: {}x{} times {}x{}", a.rows(), a.cols(), b.rows(), b.cols()));
  }
  return t.record(Op::kMatMul, a.id(), b.id(), a.value() * b.value());
}

Var gather_cols(Var a, std::vector<Index> cols) {
  const Matrix& v = a.value();
  Matrix out(v.rows(), static_cast<Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) {
    if (cols[k] < 0 || cols[k] >= v.cols()) {
      throw TapeError(TapeError::Kind::kShape, a.tape().size(), "gather_cols: index out of range");
    }
    out.col(static_cast<Index>(k)) = v.col(cols[k]);
  }
  return a.tape().record(Op::kGatherCols, a.id(), Tape::kNoParent, std::move(out), 0.0, std::move(cols));
}

Var merge_cols(Var a, std::vector<Index> cols_a, Var b, std::vector<Index> cols_b) {
  Tape& t = common_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const auto total = static_cast<Index>(cols_a.size() + cols_b.size());
  if (av.rows() != bv.rows() || av.cols() != static_cast<Index>(cols_a.size()) ||
      bv.cols() != static_cast<Index>(cols_b.size())) {
    throw TapeError(TapeError::Kind::kShape, t.size(), "merge_cols: shape mismatch");
  }
  Matrix out(av.rows(), total);
  std::vector<bool> seen(static_cast<std::size_t>(total), false);
  auto place = [&](const Matrix& src, const std::vector<Index>& cols) {
    for (std::size_t k = 0; k < cols.size(); ++k) {
      const Index c = cols[k];
      if (c < 0 || c >= total || seen[static_cast<std::size_t>(c)]) {
        throw TapeError(TapeError::Kind::kShape, t.size(), "merge_cols: columns do not partition the output");
      }
      seen[static_cast<std::size_t>(c)] = true;
      out.col(c) = src.col(static_cast<Index>(k));
    }
  };
  place(av, cols_a);
  place(bv, cols_b);
  return t.record(Op::kMergeCols, a.id(), b.id(), std::move(out), 0.0, std::move(cols_a), std::move(cols_b));
}

Var element(Var a, Index row, Index col) {
  const Matrix& v = a.value();
  if (row < 0 || row >= v.rows() || col < 0 || col >= v.cols()) {
    throw TapeError(TapeError::Kind::kShape, a.tape().size(), "element: index out of range");
  }
  return a.tape().record(Op::kElement, a.id(), Tape::kNoParent, Matrix::Constant(1, 1, v(row, col)), 0.0,
                         {row, col});
}

Var detach(Var a) { return unary(Op::kDetach, a, a.value()); }

Eigen::VectorXd backward(Var root, std::span<const Var> params) { return root.tape().gradient(root, params); }

Index flat_size(std::span<const Var> params) {
  Index total = 0;
  for (const Var& p : params) {
    total += p.value().size();
  }
  return total;
}

Eigen::MatrixXd per_sample_gradients(std::span<const Var> roots, std::span<const Var> params) {
  Eigen::MatrixXd out(static_cast<Index>(roots.size()), flat_size(params));
  for (std::size_t j = 0; j < roots.size(); ++j) {
    out.row(static_cast<Index>(j)) = backward(roots[j], params).transpose();
  }
  return out;
}

Eigen::MatrixXd per_sample_gradients(Var column, std::span<const Var> params) {
  if (column.cols() != 1) {
    throw TapeError(TapeError::Kind::kShape, column.id(), "per_sample_gradients: root must be a column");
  }
  const Index n = column.rows();
  Eigen::MatrixXd out(n, flat_size(params));
  Matrix seed = Matrix::Zero(n, 1);
  for (Index j = 0; j < n; ++j) {
    seed(j, 0) = 1.0;
    out.row(j) = column.tape().gradient_seeded(column, seed, params).transpose();
    seed(j, 0) = 0.0;
  }
  return out;
}

}  // namespace boltzlab::ad
