#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace drstack {

/// Dense convex quadratic program
///   minimize    1/2 x'Qx + q'x
///   subject to  equality.coeff' x == equality.rhs      (optional, at most one)
///               lo <= x <= hi                          (+-inf allowed)
///               inequalities[j].coeff' x <= rhs        (general rows)
/// Q must be symmetric positive semidefinite.
struct QpProblem {
  Eigen::MatrixXd Q;
  Eigen::VectorXd q;
  Eigen::VectorXd lo, hi;

  struct LinearConstraint {
    Eigen::VectorXd coeff;
    double rhs = 0.0;
  };
  std::optional<LinearConstraint> equality;
  std::vector<LinearConstraint> inequalities;

  int dim() const { return static_cast<int>(q.size()); }
};

enum class QpStatus { optimal, infeasible, max_iter };

inline const char* to_string(QpStatus s) {
  switch (s) {
    case QpStatus::optimal: return "optimal";
    case QpStatus::infeasible: return "infeasible";
    case QpStatus::max_iter: return "max_iter";
  }
  return "?";
}

/// Constraint ids used in QpSolution::active_set and for deterministic
/// tie-breaking: 0 is the equality, 1..n lower bounds, n+1..2n upper bounds,
/// 2n+1.. the general inequalities in input order.
struct QpSolution {
  Eigen::VectorXd x;
  double objective = 0.0;
  std::vector<int> active_set;
  int iterations = 0;
  QpStatus status = QpStatus::max_iter;

  // Optimality certificate (all inequality multipliers nonnegative).
  double eq_multiplier = 0.0;
  Eigen::VectorXd mult_lo, mult_hi, mult_ineq;
  double kkt_residual = std::numeric_limits<double>::infinity();
  double primal_infeasibility = std::numeric_limits<double>::infinity();
};

struct QpOptions {
  /// Free dimensions at or below this use a dense eigendecomposition for the
  /// working-set subproblem; larger ones use projected conjugate gradients.
  int direct_threshold = 64;
};

namespace detail_qp {

constexpr double kInf = std::numeric_limits<double>::infinity();

inline void chol_rank1_update(Eigen::MatrixXd& L, Eigen::VectorXd w, int k) {
  for (int j = 0; j < k; ++j) {
    const double ljj = L(j, j);
    const double r = std::hypot(ljj, w(j));
    const double c = r / ljj;
    const double s = w(j) / ljj;
    L(j, j) = r;
    for (int i = j + 1; i < k; ++i) {
      L(i, j) = (L(i, j) + s * w(i)) / c;
      w(i) = c * w(i) - s * L(i, j);
    }
  }
}

inline bool chol_rank1_downdate(Eigen::MatrixXd& L, Eigen::VectorXd w, int k) {
  for (int j = 0; j < k; ++j) {
    const double ljj = L(j, j);
    const double r2 = ljj * ljj - w(j) * w(j);
    if (r2 <= 1e-14 * ljj * ljj) return false;
    const double r = std::sqrt(r2);
    const double c = r / ljj;
    const double s = w(j) / ljj;
    L(j, j) = r;
    for (int i = j + 1; i < k; ++i) {
      L(i, j) = (L(i, j) - s * w(i)) / c;
      w(i) = c * w(i) - s * L(i, j);
    }
  }
  return true;
}

/// Primal active-set solver.  Variables at a bound are eliminated from the
/// subproblem; the equality plus active general inequalities form the row
/// working set, whose Gram matrix over the free columns carries a Cholesky
/// factor maintained incrementally (append / rank-one update / rebuild).
class ActiveSetQp {
 public:
  ActiveSetQp(const QpProblem& p, int max_iter, const QpOptions& opt)
      : P(p), n(p.dim()), max_iter_(max_iter), opt_(opt) {}

  QpSolution run() {
    validate_problem();
    build_rows();
    QpSolution sol;
    if (!phase1()) {
      sol.x = x_;
      sol.status = QpStatus::infeasible;
      sol.iterations = 0;
      sol.mult_lo = Eigen::VectorXd::Zero(n);
      sol.mult_hi = Eigen::VectorXd::Zero(n);
      sol.mult_ineq = Eigen::VectorXd::Zero(static_cast<int>(P.inequalities.size()));
      sol.primal_infeasibility = primal_infeasibility();
      return sol;
    }
    init_working_set();
    g_ = apply_q(x_) + P.q;

    bool converged = false;
    int iter = 0;
    int degenerate_streak = 0;
    for (; iter < max_iter_; ++iter) {
      if ((iter & 255) == 255) g_ = apply_q(x_) + P.q;  // drift control
      Direction dir = subproblem();
      if (dir.kind == Direction::stationary) {
        const int drop_id = negative_multiplier(degenerate_streak > 40);
        if (drop_id < 0) {
          converged = true;
          break;
        }
        drop_constraint(drop_id);
        continue;
      }
      const bool is_ray = dir.kind == Direction::ray;
      const double cap = is_ray ? kInf : 1.0;
      auto [alpha, block_id] = blocking_step(dir.p, cap);
      if (is_ray && block_id < 0)
        throw std::runtime_error("qp: objective unbounded below over the feasible set");
      const double step = std::min(alpha, cap);
      degenerate_streak = step <= 1e-12 ? degenerate_streak + 1 : 0;
      take_step(step, dir.p);
      if (block_id >= 0 && alpha <= cap) add_constraint(block_id);
    }

    finalize(sol, iter, converged);
    return sol;
  }

 private:
  struct Row {
    int id = 0;  // constraint id (0 equality, 2n+1+j inequality j)
    std::vector<int> idx;
    std::vector<double> val;
    double rhs = 0.0;
    double norm2 = 0.0;
    bool is_equality = false;
  };

  struct Direction {
    enum Kind { stationary, step, ray } kind = stationary;
    Eigen::VectorXd p;
  };

  enum class Fix : std::int8_t { free_, at_lo, at_hi };

  const QpProblem& P;
  const int n;
  const int max_iter_;
  const QpOptions opt_;

  bool diag_q_ = false;
  Eigen::VectorXd qdiag_;
  double q_scale_ = 1.0;

  std::vector<Row> rows_;  // equality (if any) first, then inequalities
  int eq_row_ = -1;        // index into rows_, -1 if absent

  Eigen::VectorXd x_, g_;
  std::vector<double> rowval_;  // current coeff'x per row
  std::vector<Fix> fix_;
  int free_count_ = 0;

  std::vector<int> act_;      // positions into rows_ forming the working set
  std::vector<int> act_pos_;  // rows_ index -> position in act_, or -1
  Eigen::MatrixXd G_, L_;     // Gram of act_ rows over free columns + Cholesky

  double stat_tol_ = 1e-10;
  double dual_tol_ = 1e-9;

  // ----- setup -------------------------------------------------------------

  void validate_problem() {
    if (n <= 0) throw std::invalid_argument("qp: empty problem");
    if (P.Q.rows() != n || P.Q.cols() != n || P.lo.size() != n || P.hi.size() != n)
      throw std::invalid_argument("qp: inconsistent dimensions");
    for (int i = 0; i < n; ++i)
      if (!(P.lo(i) <= P.hi(i))) throw std::invalid_argument("qp: lo > hi for a variable");
    if (P.equality && P.equality->coeff.size() != n)
      throw std::invalid_argument("qp: equality coefficient size mismatch");
    for (const auto& c : P.inequalities)
      if (c.coeff.size() != n) throw std::invalid_argument("qp: inequality coefficient size mismatch");

    const double qmax = P.Q.cwiseAbs().maxCoeff();
    q_scale_ = std::max(1.0, qmax);
    const double asym = (P.Q - P.Q.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-12 * q_scale_) throw std::invalid_argument("qp: Q is not symmetric");

    diag_q_ = true;
    for (int i = 0; i < n && diag_q_; ++i)
      for (int j = 0; j < n; ++j)
        if (i != j && P.Q(i, j) != 0.0) {
          diag_q_ = false;
          break;
        }
    if (diag_q_) {
      qdiag_ = P.Q.diagonal();
      if (qdiag_.minCoeff() < -1e-10 * q_scale_)
        throw std::invalid_argument("qp: Q is not positive semidefinite");
      qdiag_ = qdiag_.cwiseMax(0.0);
    } else if (n <= 384) {
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(P.Q, Eigen::EigenvaluesOnly);
      if (es.eigenvalues().minCoeff() < -1e-10 * std::max(1.0, es.eigenvalues().maxCoeff()))
        throw std::invalid_argument("qp: Q is not positive semidefinite");
    } else {
      Eigen::LDLT<Eigen::MatrixXd> ldlt(P.Q);
      const double dmax = std::max(1.0, ldlt.vectorD().maxCoeff());
      if (ldlt.vectorD().minCoeff() < -1e-8 * dmax)
        throw std::invalid_argument("qp: Q is not positive semidefinite");
    }

    stat_tol_ = 1e-10 * std::max(1.0, P.q.cwiseAbs().maxCoeff());
    dual_tol_ = 1e-9 * std::max(1.0, P.q.cwiseAbs().maxCoeff());
  }

  void build_rows() {
    if (P.equality) {
      Row r;
      r.id = 0;
      r.is_equality = true;
      r.rhs = P.equality->rhs;
      pack_row(P.equality->coeff, r);
      if (!r.idx.empty()) {
        eq_row_ = 0;
        rows_.push_back(std::move(r));
      } else if (std::abs(r.rhs) > 1e-12) {
        // 0 == nonzero: recorded as an infeasible phase-1 outcome
        eq_row_ = -2;
      }
    }
    for (std::size_t j = 0; j < P.inequalities.size(); ++j) {
      Row r;
      r.id = 1 + 2 * n + static_cast<int>(j);
      r.rhs = P.inequalities[j].rhs;
      pack_row(P.inequalities[j].coeff, r);
      rows_.push_back(std::move(r));
    }
  }

  static void pack_row(const Eigen::VectorXd& coeff, Row& r) {
    for (int i = 0; i < coeff.size(); ++i)
      if (coeff(i) != 0.0) {
        r.idx.push_back(i);
        r.val.push_back(coeff(i));
        r.norm2 += coeff(i) * coeff(i);
      }
  }

  // ----- phase 1 -----------------------------------------------------------

  bool box_hyperplane_feasible() const {
    if (eq_row_ == -2) return false;
    if (eq_row_ < 0) {
      for (int i = 0; i < n; ++i)
        if (P.lo(i) > P.hi(i)) return false;
      return true;
    }
    const Row& e = rows_[eq_row_];
    double smin = 0.0, smax = 0.0;
    for (std::size_t k = 0; k < e.idx.size(); ++k) {
      const int i = e.idx[k];
      const double a = e.val[k];
      const double c1 = a * P.lo(i), c2 = a * P.hi(i);
      smin += std::min(c1, c2);
      smax += std::max(c1, c2);
    }
    const double tol = 1e-9 * std::max(1.0, std::abs(e.rhs));
    return e.rhs >= smin - tol && e.rhs <= smax + tol;
  }

  /// Distributes the equality residual over coordinates with slack,
  /// proportionally to capacity; one pass is exact.
  bool repair_equality(Eigen::VectorXd& x) const {
    if (eq_row_ < 0) return eq_row_ != -2;
    const Row& e = rows_[eq_row_];
    double val = 0.0;
    for (std::size_t k = 0; k < e.idx.size(); ++k) val += e.val[k] * x(e.idx[k]);
    const double delta = e.rhs - val;
    const double tol = 1e-12 * std::max(1.0, std::abs(e.rhs));
    if (std::abs(delta) <= tol) return true;

    // capacity of coordinate k to move val toward rhs, in units of |delta|
    std::vector<double> cap(e.idx.size(), 0.0);
    double total = 0.0;
    int inf_at = -1;
    for (std::size_t k = 0; k < e.idx.size(); ++k) {
      const int i = e.idx[k];
      const double a = e.val[k];
      const double room = (delta > 0.0) == (a > 0.0) ? P.hi(i) - x(i) : x(i) - P.lo(i);
      cap[k] = std::abs(a) * std::max(0.0, room);
      if (std::isinf(cap[k]) && inf_at < 0) inf_at = static_cast<int>(k);
      total += cap[k];
    }
    if (inf_at >= 0) {
      const int i = e.idx[inf_at];
      x(i) += delta / e.val[inf_at];
      return true;
    }
    if (total < std::abs(delta) * (1.0 - 1e-12)) return false;
    for (std::size_t k = 0; k < e.idx.size(); ++k) {
      if (cap[k] <= 0.0) continue;
      x(e.idx[k]) += (cap[k] / total) * delta / e.val[k];
    }
    return true;
  }

  /// Euclidean projection onto {lo <= y <= hi, coeff'y == rhs} by a monotone
  /// 1-D search on the hyperplane multiplier.
  Eigen::VectorXd project_box_hyperplane(const Eigen::VectorXd& z) const {
    Eigen::VectorXd y = z.cwiseMax(P.lo).cwiseMin(P.hi);
    if (eq_row_ < 0) return y;
    const Row& e = rows_[eq_row_];
    auto h = [&](double tau) {
      double s = 0.0;
      for (std::size_t k = 0; k < e.idx.size(); ++k) {
        const int i = e.idx[k];
        const double a = e.val[k];
        s += a * std::clamp(z(i) + tau * a, P.lo(i), P.hi(i));
      }
      return s;
    };
    double t_lo = -1.0, t_hi = 1.0;
    for (int it = 0; it < 200 && h(t_lo) > e.rhs; ++it) t_lo *= 2.0;
    for (int it = 0; it < 200 && h(t_hi) < e.rhs; ++it) t_hi *= 2.0;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (t_lo + t_hi);
      (h(mid) < e.rhs ? t_lo : t_hi) = mid;
    }
    const double tau = 0.5 * (t_lo + t_hi);
    for (std::size_t k = 0; k < e.idx.size(); ++k) {
      const int i = e.idx[k];
      y(i) = std::clamp(z(i) + tau * e.val[k], P.lo(i), P.hi(i));
    }
    repair_equality(y);
    return y;
  }

  bool phase1() {
    x_ = Eigen::VectorXd::Zero(n).cwiseMax(P.lo).cwiseMin(P.hi);
    if (!box_hyperplane_feasible()) return false;
    if (eq_row_ >= 0) {
      const Row& e = rows_[eq_row_];
      double val = 0.0;
      for (std::size_t k = 0; k < e.idx.size(); ++k) val += e.val[k] * x_(e.idx[k]);
      const double shift = (e.rhs - val) / e.norm2;
      for (std::size_t k = 0; k < e.idx.size(); ++k) {
        const int i = e.idx[k];
        x_(i) = std::clamp(x_(i) + shift * e.val[k], P.lo(i), P.hi(i));
      }
      if (!repair_equality(x_)) return false;
    }

    // General inequalities: alternating (Dykstra) projections between the
    // box(+hyperplane) set and each violated halfspace.
    if (!rows_.empty()) {
      const int m = static_cast<int>(rows_.size());
      const double ftol = feas_tol();
      bool ok = max_violation() <= ftol;
      if (!ok) {
        std::vector<Eigen::VectorXd> corr(m + 1, Eigen::VectorXd::Zero(n));
        for (int sweep = 0; sweep < 500 + 50 * m && !ok; ++sweep) {
          {
            Eigen::VectorXd z = x_ + corr[0];
            Eigen::VectorXd y = project_box_hyperplane(z);
            corr[0] = z - y;
            x_ = y;
          }
          for (int r = 0; r < m; ++r) {
            if (rows_[r].is_equality) continue;
            Eigen::VectorXd z = x_ + corr[r + 1];
            double v = 0.0;
            for (std::size_t k = 0; k < rows_[r].idx.size(); ++k)
              v += rows_[r].val[k] * z(rows_[r].idx[k]);
            Eigen::VectorXd y = z;
            if (v > rows_[r].rhs) {
              const double t = (v - rows_[r].rhs) / rows_[r].norm2;
              for (std::size_t k = 0; k < rows_[r].idx.size(); ++k)
                y(rows_[r].idx[k]) -= t * rows_[r].val[k];
            }
            corr[r + 1] = z - y;
            x_ = y;
          }
          ok = max_violation() <= ftol;
        }
        if (!ok) return false;
        // Land exactly inside box and on the hyperplane.
        x_ = x_.cwiseMax(P.lo).cwiseMin(P.hi);
        if (!repair_equality(x_)) return false;
        if (max_violation() > 10.0 * ftol) return false;
      }
    }

    rowval_.assign(rows_.size(), 0.0);
    for (std::size_t r = 0; r < rows_.size(); ++r) {
      double v = 0.0;
      for (std::size_t k = 0; k < rows_[r].idx.size(); ++k) v += rows_[r].val[k] * x_(rows_[r].idx[k]);
      rowval_[r] = v;
    }
    return true;
  }

  double feas_tol() const {
    double scale = 1.0;
    for (const auto& r : rows_) scale = std::max(scale, std::abs(r.rhs));
    return 1e-10 * scale;
  }

  double max_violation() const {
    double v = 0.0;
    for (const auto& r : rows_) {
      double val = 0.0;
      for (std::size_t k = 0; k < r.idx.size(); ++k) val += r.val[k] * x_(r.idx[k]);
      v = std::max(v, r.is_equality ? std::abs(val - r.rhs) : val - r.rhs);
    }
    return v;
  }

  // ----- working set & Gram-Cholesky ----------------------------------------

  void init_working_set() {
    fix_.assign(n, Fix::free_);
    free_count_ = n;
    for (int i = 0; i < n; ++i) {
      if (x_(i) <= P.lo(i)) {
        x_(i) = P.lo(i);
        fix_[i] = Fix::at_lo;
        --free_count_;
      } else if (x_(i) >= P.hi(i)) {
        x_(i) = P.hi(i);
        fix_[i] = Fix::at_hi;
        --free_count_;
      }
    }
    act_.clear();
    act_pos_.assign(rows_.size(), -1);
    const int cap = static_cast<int>(rows_.size());
    G_.setZero(std::max(cap, 1), std::max(cap, 1));
    L_.setZero(std::max(cap, 1), std::max(cap, 1));
    if (eq_row_ >= 0 && row_free_norm2(eq_row_) > 1e-14 * rows_[eq_row_].norm2)
      append_row(eq_row_);
  }

  double row_free_norm2(int r) const {
    double s = 0.0;
    for (std::size_t k = 0; k < rows_[r].idx.size(); ++k)
      if (fix_[rows_[r].idx[k]] == Fix::free_) s += rows_[r].val[k] * rows_[r].val[k];
    return s;
  }

  double row_dot_free(int r, int s) const {
    // rows are short except the equality; iterate the shorter one
    const Row& a = rows_[r].idx.size() <= rows_[s].idx.size() ? rows_[r] : rows_[s];
    const Row& b = &a == &rows_[r] ? rows_[s] : rows_[r];
    double acc = 0.0;
    for (std::size_t k = 0; k < a.idx.size(); ++k) {
      const int i = a.idx[k];
      if (fix_[i] != Fix::free_) continue;
      // binary search in b
      const auto it = std::lower_bound(b.idx.begin(), b.idx.end(), i);
      if (it != b.idx.end() && *it == i) acc += a.val[k] * b.val[it - b.idx.begin()];
    }
    return acc;
  }

  double row_dot_vec(int r, const Eigen::VectorXd& v, bool free_only) const {
    double acc = 0.0;
    const Row& row = rows_[r];
    for (std::size_t k = 0; k < row.idx.size(); ++k) {
      const int i = row.idx[k];
      if (free_only && fix_[i] != Fix::free_) continue;
      acc += row.val[k] * v(i);
    }
    return acc;
  }

  bool append_row(int r) {
    const int k = static_cast<int>(act_.size());
    Eigen::VectorXd w(k);
    for (int j = 0; j < k; ++j) w(j) = row_dot_free(act_[j], r);
    const double d = row_free_norm2(r);
    Eigen::VectorXd y = k > 0 ? Eigen::VectorXd(L_.topLeftCorner(k, k).triangularView<Eigen::Lower>().solve(w))
                              : Eigen::VectorXd(0);
    const double delta = d - y.squaredNorm();
    if (delta <= 1e-13 * std::max(d, 1e-30)) return false;
    G_.block(k, 0, 1, k) = w.transpose();
    G_.block(0, k, k, 1) = w;
    G_(k, k) = d;
    L_.row(k).head(k) = y.transpose();
    L_(k, k) = std::sqrt(delta);
    act_.push_back(r);
    act_pos_[r] = k;
    return true;
  }

  void remove_act(int pos) {
    const int k = static_cast<int>(act_.size());
    act_pos_[act_[pos]] = -1;
    for (int j = pos; j + 1 < k; ++j) {
      act_[j] = act_[j + 1];
      act_pos_[act_[j]] = j;
    }
    act_.pop_back();
    // shift Gram and refactor
    const int kk = k - 1;
    for (int r = pos; r < kk; ++r)
      for (int c = 0; c < k; ++c) G_(r, c) = G_(r + 1, c);
    for (int c = pos; c < kk; ++c)
      for (int r = 0; r < kk; ++r) G_(r, c) = G_(r, c + 1);
    refactor();
  }

  void refactor() {
    int k = static_cast<int>(act_.size());
    while (k > 0) {
      Eigen::LLT<Eigen::MatrixXd> llt(G_.topLeftCorner(k, k));
      if (llt.info() == Eigen::Success) {
        double dmin = kInf;
        Eigen::MatrixXd Lc = llt.matrixL();
        for (int j = 0; j < k; ++j) dmin = std::min(dmin, Lc(j, j));
        if (dmin > 1e-10) {
          L_.topLeftCorner(k, k) = Lc;
          return;
        }
      }
      // Gram numerically singular: drop the most depleted non-equality row.
      int worst = -1;
      double worst_ratio = kInf;
      for (int j = 0; j < k; ++j) {
        const int r = act_[j];
        if (r == eq_row_ && k > 1) continue;
        const double ratio = row_free_norm2(r) / std::max(rows_[r].norm2, 1e-30);
        if (ratio < worst_ratio) {
          worst_ratio = ratio;
          worst = j;
        }
      }
      if (worst < 0) worst = k - 1;
      // inline removal without recursion
      act_pos_[act_[worst]] = -1;
      for (int j = worst; j + 1 < k; ++j) {
        act_[j] = act_[j + 1];
        act_pos_[act_[j]] = j;
      }
      act_.pop_back();
      for (int r = worst; r < k - 1; ++r)
        for (int c = 0; c < k; ++c) G_(r, c) = G_(r + 1, c);
      for (int c = worst; c < k - 1; ++c)
        for (int r = 0; r < k - 1; ++r) G_(r, c) = G_(r, c + 1);
      --k;
    }
  }

  void rebuild_gram() {
    const int k = static_cast<int>(act_.size());
    for (int a = 0; a < k; ++a)
      for (int b = a; b < k; ++b) G_(a, b) = G_(b, a) = row_dot_free(act_[a], act_[b]);
    refactor();
  }

  /// coefficient of each active row at variable v
  Eigen::VectorXd act_column(int v) const {
    const int k = static_cast<int>(act_.size());
    Eigen::VectorXd w = Eigen::VectorXd::Zero(k);
    for (int j = 0; j < k; ++j) {
      const Row& r = rows_[act_[j]];
      const auto it = std::lower_bound(r.idx.begin(), r.idx.end(), v);
      if (it != r.idx.end() && *it == v) w(j) = r.val[it - r.idx.begin()];
    }
    return w;
  }

  void fix_variable(int v, Fix which) {
    const Eigen::VectorXd w = act_column(v);
    fix_[v] = which;
    --free_count_;
    x_(v) = which == Fix::at_lo ? P.lo(v) : P.hi(v);
    const int k = static_cast<int>(act_.size());
    if (k == 0) return;
    if (w.cwiseAbs().maxCoeff() > 0.0) {
      G_.topLeftCorner(k, k) -= w * w.transpose();
      if (!chol_rank1_downdate(L_, w, k)) refactor();
    }
    // rows whose free support vanished must leave the working set
    for (int j = k - 1; j >= 0; --j) {
      if (j >= static_cast<int>(act_.size())) continue;
      const int r = act_[j];
      if (row_free_norm2(r) <= 1e-13 * std::max(rows_[r].norm2, 1e-30)) remove_act(j);
    }
  }

  void free_variable(int v) {
    fix_[v] = Fix::free_;
    ++free_count_;
    const Eigen::VectorXd w = act_column(v);
    const int k = static_cast<int>(act_.size());
    if (k > 0 && w.cwiseAbs().maxCoeff() > 0.0) {
      G_.topLeftCorner(k, k) += w * w.transpose();
      chol_rank1_update(L_, w, k);
    }
    // the equality row regains support through v and must rejoin
    if (eq_row_ >= 0 && act_pos_[eq_row_] < 0 &&
        row_free_norm2(eq_row_) > 1e-14 * rows_[eq_row_].norm2) {
      if (!append_row(eq_row_)) rebuild_gram();
    }
  }

  void add_constraint(int id) {
    if (id >= 1 && id <= n) {
      fix_variable(id - 1, Fix::at_lo);
    } else if (id >= n + 1 && id <= 2 * n) {
      fix_variable(id - n - 1, Fix::at_hi);
    } else {
      const int r = row_index_of(id);
      rowval_[r] = rows_[r].rhs;
      if (!append_row(r)) {
        rebuild_gram();
        if (!append_row(r))
          throw std::runtime_error("qp: dependent blocking constraint (degenerate geometry)");
      }
    }
  }

  void drop_constraint(int id) {
    if (id >= 1 && id <= n) {
      free_variable(id - 1);
    } else if (id >= n + 1 && id <= 2 * n) {
      free_variable(id - n - 1);
    } else {
      const int r = row_index_of(id);
      remove_act(act_pos_[r]);
    }
  }

  int row_index_of(int id) const {
    for (std::size_t r = 0; r < rows_.size(); ++r)
      if (rows_[r].id == id) return static_cast<int>(r);
    throw std::logic_error("qp: unknown constraint id");
  }

  // ----- subproblem ----------------------------------------------------------

  Eigen::VectorXd apply_q(const Eigen::VectorXd& v) const {
    return diag_q_ ? Eigen::VectorXd(qdiag_.cwiseProduct(v)) : Eigen::VectorXd(P.Q * v);
  }

  void mask_fixed(Eigen::VectorXd& v) const {
    for (int i = 0; i < n; ++i)
      if (fix_[i] != Fix::free_) v(i) = 0.0;
  }

  /// Orthogonal projection of a (fixed-masked) vector onto the null space of
  /// the active rows restricted to the free coordinates.
  void project_null(Eigen::VectorXd& v) const {
    const int k = static_cast<int>(act_.size());
    if (k == 0) return;
    Eigen::VectorXd w(k);
    for (int j = 0; j < k; ++j) w(j) = row_dot_vec(act_[j], v, true);
    L_.topLeftCorner(k, k).triangularView<Eigen::Lower>().solveInPlace(w);
    L_.topLeftCorner(k, k).transpose().triangularView<Eigen::Upper>().solveInPlace(w);
    for (int j = 0; j < k; ++j) {
      const Row& r = rows_[act_[j]];
      for (std::size_t t = 0; t < r.idx.size(); ++t) {
        const int i = r.idx[t];
        if (fix_[i] == Fix::free_) v(i) -= w(j) * r.val[t];
      }
    }
  }

  Direction subproblem() {
    if (free_count_ == 0) return {};
    return free_count_ <= opt_.direct_threshold ? subproblem_direct() : subproblem_cg();
  }

  Direction subproblem_direct() {
    const int f = free_count_;
    std::vector<int> map;
    map.reserve(f);
    for (int i = 0; i < n; ++i)
      if (fix_[i] == Fix::free_) map.push_back(i);

    const int k = static_cast<int>(act_.size());
    Eigen::MatrixXd At(f, k);  // rows of the working set, transposed, free cols
    for (int j = 0; j < k; ++j) {
      Eigen::VectorXd col = Eigen::VectorXd::Zero(f);
      const Row& r = rows_[act_[j]];
      for (std::size_t t = 0; t < r.idx.size(); ++t) {
        const auto it = std::lower_bound(map.begin(), map.end(), r.idx[t]);
        if (it != map.end() && *it == r.idx[t]) col(it - map.begin()) = r.val[t];
      }
      At.col(j) = col;
    }
    Eigen::VectorXd gf(f);
    for (int a = 0; a < f; ++a) gf(a) = g_(map[a]);

    Eigen::MatrixXd Z;
    if (k == 0) {
      Z = Eigen::MatrixXd::Identity(f, f);
    } else {
      Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(At);
      qr.setThreshold(1e-12);
      const int rank = static_cast<int>(qr.rank());
      if (rank >= f) return {};  // fully determined point
      Eigen::MatrixXd Qfull = qr.householderQ() * Eigen::MatrixXd::Identity(f, f);
      Z = Qfull.rightCols(f - rank);
    }

    Eigen::MatrixXd Qff(f, f);
    if (diag_q_) {
      Qff.setZero();
      for (int a = 0; a < f; ++a) Qff(a, a) = qdiag_(map[a]);
    } else {
      for (int a = 0; a < f; ++a)
        for (int b = 0; b < f; ++b) Qff(a, b) = P.Q(map[a], map[b]);
    }

    const Eigen::MatrixXd H = Z.transpose() * Qff * Z;
    const Eigen::VectorXd h = Z.transpose() * gf;
    if (h.lpNorm<Eigen::Infinity>() <= stat_tol_) return {};

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H);
    const Eigen::VectorXd& ev = es.eigenvalues();
    const double ethr = 1e-11 * std::max(1.0, ev.cwiseAbs().maxCoeff());

    // prefer an unbounded descent ray if one exists
    int ray_at = -1;
    double ray_mag = 10.0 * stat_tol_;
    Eigen::VectorXd hv = es.eigenvectors().transpose() * h;
    for (int j = 0; j < ev.size(); ++j)
      if (ev(j) <= ethr && std::abs(hv(j)) > ray_mag) {
        ray_mag = std::abs(hv(j));
        ray_at = j;
      }

    Direction d;
    Eigen::VectorXd pz;
    if (ray_at >= 0) {
      d.kind = Direction::ray;
      pz = es.eigenvectors().col(ray_at) * (hv(ray_at) > 0 ? -1.0 : 1.0);
    } else {
      d.kind = Direction::step;
      Eigen::VectorXd y = Eigen::VectorXd::Zero(ev.size());
      for (int j = 0; j < ev.size(); ++j)
        if (ev(j) > ethr) y += (-hv(j) / ev(j)) * es.eigenvectors().col(j);
      pz = y;
    }
    Eigen::VectorXd pf = Z * pz;
    if (d.kind == Direction::step && pf.lpNorm<Eigen::Infinity>() <= 1e-14 * std::max(1.0, x_.lpNorm<Eigen::Infinity>()))
      return {};
    d.p = Eigen::VectorXd::Zero(n);
    for (int a = 0; a < f; ++a) d.p(map[a]) = pf(a);
    return d;
  }

  Direction subproblem_cg() {
    Eigen::VectorXd r = g_;
    mask_fixed(r);
    project_null(r);
    double rr = r.squaredNorm();
    const double tol2 = stat_tol_ * stat_tol_;
    if (rr <= tol2) return {};

    Eigen::VectorXd y = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd d = -r;
    const int cap = 2 * free_count_ + 20;
    for (int it = 0; it < cap; ++it) {
      Eigen::VectorXd qd = apply_q(d);
      mask_fixed(qd);
      const double curv = d.dot(qd);
      if (curv <= 1e-13 * q_scale_ * d.squaredNorm()) {
        Direction out;
        out.kind = Direction::ray;
        out.p = d / std::max(d.lpNorm<Eigen::Infinity>(), 1e-300);
        return out;
      }
      const double alpha = rr / curv;
      y += alpha * d;
      project_null(qd);
      r += alpha * qd;
      const double rr_new = r.squaredNorm();
      if (rr_new <= tol2) break;
      d = -r + (rr_new / rr) * d;
      rr = rr_new;
      if ((it & 63) == 63) {  // drift control
        r = apply_q(y) + g_;
        mask_fixed(r);
        project_null(r);
        rr = r.squaredNorm();
        if (rr <= tol2) break;
        d = -r;
      }
    }
    if (y.lpNorm<Eigen::Infinity>() <= 1e-14 * std::max(1.0, x_.lpNorm<Eigen::Infinity>())) return {};
    Direction out;
    out.kind = Direction::step;
    out.p = y;
    return out;
  }

  // ----- stepping ------------------------------------------------------------

  std::pair<double, int> blocking_step(const Eigen::VectorXd& p, double cap) {
    double best = kInf;
    int best_id = -1;
    const double ptol = 1e-13 * std::max(1.0, p.lpNorm<Eigen::Infinity>());
    for (int i = 0; i < n; ++i) {
      if (fix_[i] != Fix::free_) continue;
      if (p(i) > ptol && std::isfinite(P.hi(i))) {
        const double a = (P.hi(i) - x_(i)) / p(i);
        if (a < best - 1e-12 * (1.0 + std::abs(best)) || (a < best + 1e-12 * (1.0 + std::abs(best)) && n + 1 + i < best_id)) {
          best = std::max(a, 0.0);
          best_id = n + 1 + i;
        }
      } else if (p(i) < -ptol && std::isfinite(P.lo(i))) {
        const double a = (P.lo(i) - x_(i)) / p(i);
        if (a < best - 1e-12 * (1.0 + std::abs(best)) || (a < best + 1e-12 * (1.0 + std::abs(best)) && 1 + i < best_id)) {
          best = std::max(a, 0.0);
          best_id = 1 + i;
        }
      }
    }
    for (std::size_t r = 0; r < rows_.size(); ++r) {
      if (rows_[r].is_equality || act_pos_[r] >= 0) continue;
      const double slope = row_dot_vec(static_cast<int>(r), p, false);
      if (slope <= 1e-13 * std::sqrt(rows_[r].norm2) * std::max(1.0, p.lpNorm<Eigen::Infinity>()))
        continue;
      const double a = std::max(0.0, (rows_[r].rhs - rowval_[r]) / slope);
      const int id = rows_[r].id;
      if (a < best - 1e-12 * (1.0 + std::abs(best)) || (a < best + 1e-12 * (1.0 + std::abs(best)) && id < best_id)) {
        best = a;
        best_id = id;
      }
    }
    if (best > cap) return {cap, best_id >= 0 && best <= cap ? best_id : -1};
    return {best, best_id};
  }

  void take_step(double alpha, const Eigen::VectorXd& p) {
    if (alpha <= 0.0) return;
    x_ += alpha * p;
    Eigen::VectorXd qp_v = apply_q(p);
    g_ += alpha * qp_v;
    for (std::size_t r = 0; r < rows_.size(); ++r) {
      if (act_pos_[r] >= 0) continue;
      rowval_[r] += alpha * row_dot_vec(static_cast<int>(r), p, false);
    }
  }

  // ----- optimality ----------------------------------------------------------

  Eigen::VectorXd row_multipliers() const {
    const int k = static_cast<int>(act_.size());
    Eigen::VectorXd rhs(k);
    for (int j = 0; j < k; ++j) rhs(j) = -row_dot_vec(act_[j], g_, true);
    if (k > 0) {
      L_.topLeftCorner(k, k).triangularView<Eigen::Lower>().solveInPlace(rhs);
      L_.topLeftCorner(k, k).transpose().triangularView<Eigen::Upper>().solveInPlace(rhs);
    }
    return rhs;
  }

  double bound_multiplier(int v, const Eigen::VectorXd& lam) const {
    double m = g_(v);
    for (int j = 0; j < static_cast<int>(act_.size()); ++j) {
      const Row& r = rows_[act_[j]];
      const auto it = std::lower_bound(r.idx.begin(), r.idx.end(), v);
      if (it != r.idx.end() && *it == v) m += lam(j) * r.val[it - r.idx.begin()];
    }
    return fix_[v] == Fix::at_lo ? m : -m;
  }

  /// Returns the id of the constraint to drop, or -1 when dual feasible.
  int negative_multiplier(bool bland) {
    const Eigen::VectorXd lam = row_multipliers();
    int worst_id = -1;
    double worst = -dual_tol_;
    auto offer = [&](int id, double value) {
      if (value >= -dual_tol_) return;
      if (bland) {
        if (worst_id < 0 || id < worst_id) {
          worst_id = id;
          worst = value;
        }
      } else if (value < worst) {
        worst = value;
        worst_id = id;
      }
    };
    for (int j = 0; j < static_cast<int>(act_.size()); ++j)
      if (!rows_[act_[j]].is_equality) offer(rows_[act_[j]].id, lam(j));
    for (int v = 0; v < n; ++v) {
      if (fix_[v] == Fix::free_) continue;
      if (P.lo(v) == P.hi(v)) continue;  // pinned variable, never released
      offer(fix_[v] == Fix::at_lo ? 1 + v : 1 + n + v, bound_multiplier(v, lam));
    }
    return worst_id;
  }

  double primal_infeasibility() const {
    double v = 0.0;
    for (int i = 0; i < n; ++i) {
      v = std::max(v, P.lo(i) - x_(i));
      v = std::max(v, x_(i) - P.hi(i));
    }
    return std::max(v, max_violation());
  }

  void finalize(QpSolution& sol, int iterations, bool converged) {
    // polish: exact bounds, then re-solve the active manifold residual
    for (int i = 0; i < n; ++i) {
      if (fix_[i] == Fix::at_lo) x_(i) = P.lo(i);
      else if (fix_[i] == Fix::at_hi) x_(i) = P.hi(i);
      else x_(i) = std::clamp(x_(i), P.lo(i), P.hi(i));
    }
    const int k = static_cast<int>(act_.size());
    if (k > 0) {
      Eigen::VectorXd e(k);
      for (int j = 0; j < k; ++j) e(j) = rows_[act_[j]].rhs - row_dot_vec(act_[j], x_, false);
      L_.topLeftCorner(k, k).triangularView<Eigen::Lower>().solveInPlace(e);
      L_.topLeftCorner(k, k).transpose().triangularView<Eigen::Upper>().solveInPlace(e);
      for (int j = 0; j < k; ++j) {
        const Row& r = rows_[act_[j]];
        for (std::size_t t = 0; t < r.idx.size(); ++t)
          if (fix_[r.idx[t]] == Fix::free_) x_(r.idx[t]) += e(j) * r.val[t];
      }
      for (int i = 0; i < n; ++i)
        if (fix_[i] == Fix::free_) x_(i) = std::clamp(x_(i), P.lo(i), P.hi(i));
    } else if (eq_row_ >= 0) {
      repair_equality(x_);
    }
    g_ = apply_q(x_) + P.q;

    const Eigen::VectorXd lam = row_multipliers();
    sol.x = x_;
    sol.objective = 0.5 * x_.dot(apply_q(x_)) + P.q.dot(x_);
    sol.iterations = iterations;
    sol.mult_lo = Eigen::VectorXd::Zero(n);
    sol.mult_hi = Eigen::VectorXd::Zero(n);
    sol.mult_ineq = Eigen::VectorXd::Zero(static_cast<int>(P.inequalities.size()));
    sol.eq_multiplier = 0.0;

    for (int j = 0; j < k; ++j) {
      const Row& r = rows_[act_[j]];
      if (r.is_equality)
        sol.eq_multiplier = lam(j);
      else
        sol.mult_ineq(r.id - 1 - 2 * n) = std::max(lam(j), 0.0);
    }
    for (int v = 0; v < n; ++v) {
      if (fix_[v] == Fix::free_) continue;
      const double m = std::max(bound_multiplier(v, lam), 0.0);
      if (fix_[v] == Fix::at_lo) sol.mult_lo(v) = m;
      else sol.mult_hi(v) = m;
      if (P.lo(v) == P.hi(v) && fix_[v] == Fix::at_lo) {
        // pinned variable: put the signed residual wherever it is nonnegative
        const double raw = bound_multiplier(v, lam);
        if (raw < 0.0) {
          sol.mult_lo(v) = 0.0;
          sol.mult_hi(v) = -raw;
        }
      }
    }

    // residuals of the certificate
    Eigen::VectorXd sta = g_;
    if (eq_row_ >= 0) {
      const Row& e = rows_[eq_row_];
      for (std::size_t t = 0; t < e.idx.size(); ++t) sta(e.idx[t]) += sol.eq_multiplier * e.val[t];
    }
    for (std::size_t r = 0; r < rows_.size(); ++r) {
      if (rows_[r].is_equality) continue;
      const double m = sol.mult_ineq(rows_[r].id - 1 - 2 * n);
      if (m == 0.0) continue;
      for (std::size_t t = 0; t < rows_[r].idx.size(); ++t)
        sta(rows_[r].idx[t]) += m * rows_[r].val[t];
    }
    sta -= sol.mult_lo;
    sta += sol.mult_hi;

    double comp = 0.0;
    for (int i = 0; i < n; ++i) {
      if (std::isfinite(P.lo(i))) comp = std::max(comp, std::abs(sol.mult_lo(i) * (x_(i) - P.lo(i))));
      if (std::isfinite(P.hi(i))) comp = std::max(comp, std::abs(sol.mult_hi(i) * (P.hi(i) - x_(i))));
    }
    for (std::size_t r = 0; r < rows_.size(); ++r) {
      if (rows_[r].is_equality) continue;
      const double slack = rows_[r].rhs - row_dot_vec(static_cast<int>(r), x_, false);
      comp = std::max(comp, std::abs(sol.mult_ineq(rows_[r].id - 1 - 2 * n) * slack));
    }

    sol.kkt_residual = std::max(sta.lpNorm<Eigen::Infinity>(), comp);
    sol.primal_infeasibility = primal_infeasibility();

    sol.active_set.clear();
    if (eq_row_ >= 0 && act_pos_[eq_row_] >= 0) sol.active_set.push_back(0);
    for (int v = 0; v < n; ++v) {
      if (fix_[v] == Fix::at_lo) sol.active_set.push_back(1 + v);
      else if (fix_[v] == Fix::at_hi) sol.active_set.push_back(1 + n + v);
    }
    for (int j = 0; j < k; ++j)
      if (!rows_[act_[j]].is_equality) sol.active_set.push_back(rows_[act_[j]].id);
    std::sort(sol.active_set.begin(), sol.active_set.end());

    sol.status = converged ? QpStatus::optimal : QpStatus::max_iter;
    if (converged && (sol.kkt_residual > 1e-8 || sol.primal_infeasibility > 1e-9))
      sol.status = QpStatus::max_iter;  // refuse to certify a sloppy point
  }
};

}  // namespace detail_qp

/// Solves the QP by a primal active-set iteration from a phase-1 feasible
/// point (equality-respecting projection, bound clipping, residual repair).
/// Deterministic: ties among blocking constraints go to the lowest id, and a
/// Bland-style rule guards against cycling on degenerate steps.
inline QpSolution solve_qp(const QpProblem& problem, int max_iter, const QpOptions& options = {}) {
  detail_qp::ActiveSetQp solver(problem, max_iter, options);
  return solver.run();
}

}  // namespace drstack
