#include "vloop/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <utility>

namespace vloop {

namespace {

// Dot product with eight independent accumulator chains. The summation
// order is fixed (stride-8 lanes, then a fixed combine tree), so results
// are reproducible while the chains vectorize.
inline double dot8(const double* a, const double* b, int n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0;
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
    s4 += a[i + 4] * b[i + 4];
    s5 += a[i + 5] * b[i + 5];
    s6 += a[i + 6] * b[i + 6];
    s7 += a[i + 7] * b[i + 7];
  }
  double tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return (((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7))) + tail;
}

}  // namespace

Tape::Node& Tape::node(Var v) {
  if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw DimensionError("invalid tape variable");
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

const Tape::Node& Tape::node(Var v) const {
  if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw DimensionError("invalid tape variable");
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

void Tape::clear() { nodes_.clear(); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

const Tensor& Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.empty() && n.value.numel() > 0) {
    // backward() not run or node untracked; expose zeros of the right shape.
    static thread_local Tensor zero;
    zero = Tensor(n.value.shape());
    return zero;
  }
  return n.grad;
}

Var Tape::push(Tensor value, std::initializer_list<Var> parents,
               std::function<void(Tape&, Node&)> backward) {
  Node n;
  n.value = std::move(value);
  for (Var p : parents) {
    if (!p.valid()) throw DimensionError("operation on invalid tape variable");
    n.parents[static_cast<std::size_t>(n.arity++)] = p.id;
    if (nodes_[static_cast<std::size_t>(p.id)].requires_grad) n.requires_grad = true;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

void Tape::backward(Var loss) {
  Node& ln = node(loss);
  if (ln.value.rank() != 0) {
    throw DimensionError("backward requires a rank-0 loss, got shape " +
                         ln.value.shape_str());
  }
  for (Node& n : nodes_) {
    if (n.requires_grad) {
      n.grad = Tensor(n.value.shape());
    }
  }
  if (!ln.requires_grad) return;  // loss unreachable from any tracked leaf
  ln.grad.at(0) = 1.0;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (n.requires_grad && n.backward) n.backward(*this, n);
  }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Var Tape::add(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  check_same_shape(av, bv, "add");
  Tensor out(av.shape());
  const int n = av.numel();
  for (int i = 0; i < n; ++i) out.at(i) = av.at(i) + bv.at(i);
  return push(std::move(out), {a, b}, [](Tape& t, Node& self) {
    const int n = self.grad.numel();
    for (int p = 0; p < 2; ++p) {
      const int pid = self.parents[static_cast<std::size_t>(p)];
      if (!t.wants_grad(pid)) continue;
      Tensor& g = t.grad_buf(pid);
      for (int i = 0; i < n; ++i) g.at(i) += self.grad.at(i);
    }
  });
}

Var Tape::sub(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  check_same_shape(av, bv, "sub");
  Tensor out(av.shape());
  const int n = av.numel();
  for (int i = 0; i < n; ++i) out.at(i) = av.at(i) - bv.at(i);
  return push(std::move(out), {a, b}, [](Tape& t, Node& self) {
    const int n = self.grad.numel();
    if (t.wants_grad(self.parents[0])) {
      Tensor& g = t.grad_buf(self.parents[0]);
      for (int i = 0; i < n; ++i) g.at(i) += self.grad.at(i);
    }
    if (t.wants_grad(self.parents[1])) {
      Tensor& g = t.grad_buf(self.parents[1]);
      for (int i = 0; i < n; ++i) g.at(i) -= self.grad.at(i);
    }
  });
}

Var Tape::mul(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  check_same_shape(av, bv, "mul");
  Tensor out(av.shape());
  const int n = av.numel();
  for (int i = 0; i < n; ++i) out.at(i) = av.at(i) * bv.at(i);
  return push(std::move(out), {a, b}, [](Tape& t, Node& self) {
    const int n = self.grad.numel();
    const Tensor& av = t.value_of(self.parents[0]);
    const Tensor& bv = t.value_of(self.parents[1]);
    if (t.wants_grad(self.parents[0])) {
      Tensor& g = t.grad_buf(self.parents[0]);
      for (int i = 0; i < n; ++i) g.at(i) += self.grad.at(i) * bv.at(i);
    }
    if (t.wants_grad(self.parents[1])) {
      Tensor& g = t.grad_buf(self.parents[1]);
      for (int i = 0; i < n; ++i) g.at(i) += self.grad.at(i) * av.at(i);
    }
  });
}

Var Tape::scale(Var a, double c) {
  const Tensor& av = value(a);
  Tensor out(av.shape());
  const int n = av.numel();
  for (int i = 0; i < n; ++i) out.at(i) = c * av.at(i);
  return push(std::move(out), {a}, [c](Tape& t, Node& self) {
    if (!t.wants_grad(self.parents[0])) return;
    Tensor& g = t.grad_buf(self.parents[0]);
    const int n = self.grad.numel();
    for (int i = 0; i < n; ++i) g.at(i) += c * self.grad.at(i);
  });
}

Var Tape::add_const(Var a, double c) {
  const Tensor& av = value(a);
  Tensor out(av.shape());
  const int n = av.numel();
  for (int i = 0; i < n; ++i) out.at(i) = av.at(i) + c;
  return push(std::move(out), {a}, [](Tape& t, Node& self) {
    if (!t.wants_grad(self.parents[0])) return;
    Tensor& g = t.grad_buf(self.parents[0]);
    const int n = self.grad.numel();
    for (int i = 0; i < n; ++i) g.at(i) += self.grad.at(i);
  });
}

Var Tape::relu(Var a) {
  const Tensor& av = value(a);
  Tensor out(av.shape());
  const int n = av.numel();
  for (int i = 0; i < n; ++i) out.at(i) = av.at(i) > 0.0 ? av.at(i) : 0.0;
  return push(std::move(out), {a}, [](Tape& t, Node& self) {
    if (!t.wants_grad(self.parents[0])) return;
    const Tensor& av = t.value_of(self.parents[0]);
    Tensor& g = t.grad_buf(self.parents[0]);
    const int n = self.grad.numel();
    for (int i = 0; i < n; ++i) {
      if (av.at(i) > 0.0) g.at(i) += self.grad.at(i);
    }
  });
}

Var Tape::tanh_(Var a) {
  const Tensor& av = value(a);
  Tensor out(av.shape());
  const int n = av.numel();
  for (int i = 0; i < n; ++i) out.at(i) = std::tanh(av.at(i));
  return push(std::move(out), {a}, [](Tape& t, Node& self) {
    if (!t.wants_grad(self.parents[0])) return;
    Tensor& g = t.grad_buf(self.parents[0]);
    const int n = self.grad.numel();
    for (int i = 0; i < n; ++i) {
      const double y = self.value.at(i);
      g.at(i) += self.grad.at(i) * (1.0 - y * y);
    }
  });
}

Var Tape::sigmoid_(Var a) {
  const Tensor& av = value(a);
  Tensor out(av.shape());
  const int n = av.numel();
  for (int i = 0; i < n; ++i) out.at(i) = 1.0 / (1.0 + std::exp(-av.at(i)));
  return push(std::move(out), {a}, [](Tape& t, Node& self) {
    if (!t.wants_grad(self.parents[0])) return;
    Tensor& g = t.grad_buf(self.parents[0]);
    const int n = self.grad.numel();
    for (int i = 0; i < n; ++i) {
      const double y = self.value.at(i);
      g.at(i) += self.grad.at(i) * y * (1.0 - y);
    }
  });
}

Var Tape::exp_(Var a) {
  const Tensor& av = value(a);
  Tensor out(av.shape());
  const int n = av.numel();
  for (int i = 0; i < n; ++i) out.at(i) = std::exp(av.at(i));
  return push(std::move(out), {a}, [](Tape& t, Node& self) {
    if (!t.wants_grad(self.parents[0])) return;
    Tensor& g = t.grad_buf(self.parents[0]);
    const int n = self.grad.numel();
    for (int i = 0; i < n; ++i) g.at(i) += self.grad.at(i) * self.value.at(i);
  });
}

Var Tape::softplus(Var a) {
  const Tensor& av = value(a);
  Tensor out(av.shape());
  const int n = av.numel();
  for (int i = 0; i < n; ++i) {
    const double x = av.at(i);
    out.at(i) = x > 30.0 ? x : std::log1p(std::exp(x));
  }
  return push(std::move(out), {a}, [](Tape& t, Node& self) {
    if (!t.wants_grad(self.parents[0])) return;
    const Tensor& av = t.value_of(self.parents[0]);
    Tensor& g = t.grad_buf(self.parents[0]);
    const int n = self.grad.numel();
    for (int i = 0; i < n; ++i) {
      const double s = 1.0 / (1.0 + std::exp(-av.at(i)));
      g.at(i) += self.grad.at(i) * s;
    }
  });
}

Var Tape::clamp(Var a, double lo, double hi) {
  const Tensor& av = value(a);
  Tensor out(av.shape());
  const int n = av.numel();
  for (int i = 0; i < n; ++i) out.at(i) = std::min(hi, std::max(lo, av.at(i)));
  return push(std::move(out), {a}, [lo, hi](Tape& t, Node& self) {
    if (!t.wants_grad(self.parents[0])) return;
    const Tensor& av = t.value_of(self.parents[0]);
    Tensor& g = t.grad_buf(self.parents[0]);
    const int n = self.grad.numel();
    for (int i = 0; i < n; ++i) {
      if (av.at(i) > lo && av.at(i) < hi) g.at(i) += self.grad.at(i);
    }
  });
}

Var Tape::softmax(Var a) {
  const Tensor& av = value(a);
  if (av.rank() != 1) {
    throw DimensionError("softmax expects a vector, got " + av.shape_str());
  }
  const int n = av.numel();
  Tensor out(av.shape());
  double mx = av.at(0);
  for (int i = 1; i < n; ++i) mx = std::max(mx, av.at(i));
  double denom = 0.0;
  for (int i = 0; i < n; ++i) {
    out.at(i) = std::exp(av.at(i) - mx);
    denom += out.at(i);
  }
  for (int i = 0; i < n; ++i) out.at(i) /= denom;
  return push(std::move(out), {a}, [](Tape& t, Node& self) {
    if (!t.wants_grad(self.parents[0])) return;
    Tensor& g = t.grad_buf(self.parents[0]);
    const int n = self.grad.numel();
    double gy = 0.0;
    for (int i = 0; i < n; ++i) gy += self.grad.at(i) * self.value.at(i);
    for (int i = 0; i < n; ++i) {
      g.at(i) += self.value.at(i) * (self.grad.at(i) - gy);
    }
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Var Tape::sum(Var a) {
  const Tensor& av = value(a);
  double acc = 0.0;
  const int n = av.numel();
  for (int i = 0; i < n; ++i) acc += av.at(i);
  return push(Tensor::scalar(acc), {a}, [](Tape& t, Node& self) {
    if (!t.wants_grad(self.parents[0])) return;
    Tensor& g = t.grad_buf(self.parents[0]);
    const double gs = self.grad.at(0);
    const int n = g.numel();
    for (int i = 0; i < n; ++i) g.at(i) += gs;
  });
}

Var Tape::dot(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  check_same_shape(av, bv, "dot");
  double acc = 0.0;
  const int n = av.numel();
  for (int i = 0; i < n; ++i) acc += av.at(i) * bv.at(i);
  return push(Tensor::scalar(acc), {a, b}, [](Tape& t, Node& self) {
    const double gs = self.grad.at(0);
    const Tensor& av = t.value_of(self.parents[0]);
    const Tensor& bv = t.value_of(self.parents[1]);
    const int n = av.numel();
    if (t.wants_grad(self.parents[0])) {
      Tensor& g = t.grad_buf(self.parents[0]);
      for (int i = 0; i < n; ++i) g.at(i) += gs * bv.at(i);
    }
    if (t.wants_grad(self.parents[1])) {
      Tensor& g = t.grad_buf(self.parents[1]);
      for (int i = 0; i < n; ++i) g.at(i) += gs * av.at(i);
    }
  });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Var Tape::matmul(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + av.shape_str() +
                         " and " + bv.shape_str());
  }
  const int m = av.dim(0), n = av.dim(1), p = bv.dim(1);
  Tensor out({m, p});
  const double* A = av.data();
  const double* B = bv.data();
  double* C = out.data();
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < n; ++kk) {
      const double aik = A[i * n + kk];
      const double* brow = B + kk * p;
      double* crow = C + i * p;
      for (int j = 0; j < p; ++j) crow[j] += aik * brow[j];
    }
  }
  return push(std::move(out), {a, b}, [m, n, p](Tape& t, Node& self) {
    const Tensor& av = t.value_of(self.parents[0]);
    const Tensor& bv = t.value_of(self.parents[1]);
    const double* G = self.grad.data();
    if (t.wants_grad(self.parents[0])) {
      // dA = G * B^T
      double* dA = t.grad_buf(self.parents[0]).data();
      const double* B = bv.data();
      for (int i = 0; i < m; ++i) {
        for (int kk = 0; kk < n; ++kk) {
          dA[i * n + kk] += dot8(G + i * p, B + kk * p, p);
        }
      }
    }
    if (t.wants_grad(self.parents[1])) {
      // dB = A^T * G
      double* dB = t.grad_buf(self.parents[1]).data();
      const double* A = av.data();
      for (int kk = 0; kk < n; ++kk) {
        for (int i = 0; i < m; ++i) {
          const double aik = A[i * n + kk];
          const double* grow = G + i * p;
          double* drow = dB + kk * p;
          for (int j = 0; j < p; ++j) drow[j] += aik * grow[j];
        }
      }
    }
  });
}

Var Tape::matvec(Var a, Var x) {
  const Tensor& av = value(a);
  const Tensor& xv = value(x);
  if (av.rank() != 2 || xv.rank() != 1 || av.dim(1) != xv.dim(0)) {
    throw DimensionError("matvec: incompatible shapes " + av.shape_str() +
                         " and " + xv.shape_str());
  }
  const int m = av.dim(0), n = av.dim(1);
  Tensor out({m});
  const double* A = av.data();
  const double* X = xv.data();
  for (int i = 0; i < m; ++i) out.at(i) = dot8(A + i * n, X, n);
  return push(std::move(out), {a, x}, [m, n](Tape& t, Node& self) {
    const double* G = self.grad.data();
    const Tensor& av = t.value_of(self.parents[0]);
    const Tensor& xv = t.value_of(self.parents[1]);
    if (t.wants_grad(self.parents[0])) {
      double* dA = t.grad_buf(self.parents[0]).data();
      const double* X = xv.data();
      for (int i = 0; i < m; ++i) {
        const double gi = G[i];
        double* drow = dA + i * n;
        for (int j = 0; j < n; ++j) drow[j] += gi * X[j];
      }
    }
    if (t.wants_grad(self.parents[1])) {
      double* dX = t.grad_buf(self.parents[1]).data();
      const double* A = av.data();
      for (int i = 0; i < m; ++i) {
        const double gi = G[i];
        const double* arow = A + i * n;
        for (int j = 0; j < n; ++j) dX[j] += gi * arow[j];
      }
    }
  });
}

Var Tape::linear(Var w, Var x, Var b) {
  const Tensor& wv = value(w);
  const Tensor& xv = value(x);
  const Tensor& bv = value(b);
  if (wv.rank() != 2 || xv.rank() != 1 || bv.rank() != 1 ||
      wv.dim(1) != xv.dim(0) || wv.dim(0) != bv.dim(0)) {
    throw DimensionError("linear: incompatible shapes " + wv.shape_str() + ", " +
                         xv.shape_str() + ", " + bv.shape_str());
  }
  const int m = wv.dim(0), n = wv.dim(1);
  Tensor out({m});
  const double* W = wv.data();
  const double* X = xv.data();
  for (int i = 0; i < m; ++i) out.at(i) = bv.at(i) + dot8(W + i * n, X, n);
  return push(std::move(out), {w, x, b}, [m, n](Tape& t, Node& self) {
    const double* G = self.grad.data();
    const Tensor& wv = t.value_of(self.parents[0]);
    const Tensor& xv = t.value_of(self.parents[1]);
    const bool want_w = t.wants_grad(self.parents[0]);
    const bool want_x = t.wants_grad(self.parents[1]);
    const bool want_b = t.wants_grad(self.parents[2]);
    double* dW = want_w ? t.grad_buf(self.parents[0]).data() : nullptr;
    double* dX = want_x ? t.grad_buf(self.parents[1]).data() : nullptr;
    double* dB = want_b ? t.grad_buf(self.parents[2]).data() : nullptr;
    const double* W = wv.data();
    const double* X = xv.data();
    for (int i = 0; i < m; ++i) {
      const double gi = G[i];
      if (dB) dB[i] += gi;
      if (dW) {
        double* drow = dW + i * n;
        for (int j = 0; j < n; ++j) drow[j] += gi * X[j];
      }
      if (dX) {
        const double* wrow = W + i * n;
        for (int j = 0; j < n; ++j) dX[j] += gi * wrow[j];
      }
    }
  });
}

Var Tape::transpose2d(Var a) {
  const Tensor& av = value(a);
  if (av.rank() != 2) {
    throw DimensionError("transpose2d expects rank 2, got " + av.shape_str());
  }
  const int m = av.dim(0), n = av.dim(1);
  Tensor out({n, m});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) out.at(j, i) = av.at(i, j);
  }
  return push(std::move(out), {a}, [m, n](Tape& t, Node& self) {
    if (!t.wants_grad(self.parents[0])) return;
    Tensor& g = t.grad_buf(self.parents[0]);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) g.at(i, j) += self.grad.at(j, i);
    }
  });
}

// ---------------------------------------------------------------------------
// shape
// ---------------------------------------------------------------------------

Var Tape::reshape(Var a, std::vector<int> shape) {
  const Tensor& av = value(a);
  Tensor out(std::move(shape));
  if (out.numel() != av.numel()) {
    throw DimensionError("reshape: element count mismatch " + av.shape_str() +
                         " -> " + out.shape_str());
  }
  std::memcpy(out.data(), av.data(),
              static_cast<std::size_t>(av.numel()) * sizeof(double));
  return push(std::move(out), {a}, [](Tape& t, Node& self) {
    if (!t.wants_grad(self.parents[0])) return;
    Tensor& g = t.grad_buf(self.parents[0]);
    const int n = self.grad.numel();
    for (int i = 0; i < n; ++i) g.at(i) += self.grad.at(i);
  });
}

Var Tape::concat(const std::vector<Var>& parts) {
  if (parts.empty() || parts.size() > 4) {
    throw DimensionError("concat expects 1..4 vectors");
  }
  int total = 0;
  for (Var p : parts) {
    const Tensor& pv = value(p);
    if (pv.rank() != 1) {
      throw DimensionError("concat expects vectors, got " + pv.shape_str());
    }
    total += pv.numel();
  }
  Tensor out({total});
  int off = 0;
  for (Var p : parts) {
    const Tensor& pv = value(p);
    std::memcpy(out.data() + off, pv.data(),
                static_cast<std::size_t>(pv.numel()) * sizeof(double));
    off += pv.numel();
  }
  Node n;
  n.value = std::move(out);
  for (Var p : parts) {
    n.parents[static_cast<std::size_t>(n.arity++)] = p.id;
    if (nodes_[static_cast<std::size_t>(p.id)].requires_grad) n.requires_grad = true;
  }
  if (n.requires_grad) {
    n.backward = [](Tape& t, Node& self) {
      int off = 0;
      for (int p = 0; p < self.arity; ++p) {
        const int pid = self.parents[static_cast<std::size_t>(p)];
        const int len = t.value_of(pid).numel();
        if (t.wants_grad(pid)) {
          Tensor& g = t.grad_buf(pid);
          for (int i = 0; i < len; ++i) g.at(i) += self.grad.at(off + i);
        }
        off += len;
      }
    };
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::slice1d(Var a, int start, int len) {
  const Tensor& av = value(a);
  if (av.rank() != 1 || start < 0 || len <= 0 || start + len > av.numel()) {
    throw DimensionError("slice1d: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of " +
                         av.shape_str());
  }
  Tensor out({len});
  std::memcpy(out.data(), av.data() + start,
              static_cast<std::size_t>(len) * sizeof(double));
  return push(std::move(out), {a}, [start, len](Tape& t, Node& self) {
    if (!t.wants_grad(self.parents[0])) return;
    Tensor& g = t.grad_buf(self.parents[0]);
    for (int i = 0; i < len; ++i) g.at(start + i) += self.grad.at(i);
  });
}

// ---------------------------------------------------------------------------
// sequence / conv
// ---------------------------------------------------------------------------

Var Tape::conv1d(Var input, Var weights, int stride, int padding) {
  const Tensor& xv = value(input);
  const Tensor& wv = value(weights);
  if (xv.rank() != 2 || wv.rank() != 3 || wv.dim(1) != xv.dim(0)) {
    throw DimensionError("conv1d: incompatible shapes " + xv.shape_str() +
                         " and " + wv.shape_str());
  }
  if (stride <= 0 || padding < 0) {
    throw DimensionError("conv1d: stride must be positive, padding non-negative");
  }
  const int cin = xv.dim(0), len = xv.dim(1);
  const int cout = wv.dim(0), ksz = wv.dim(2);
  if (len + 2 * padding < ksz) {
    throw DimensionError("conv1d: input too short, length " +
                         std::to_string(len) + " with padding " +
                         std::to_string(padding) + " < kernel " +
                         std::to_string(ksz));
  }
  const int lout = (len + 2 * padding - ksz) / stride + 1;
  Tensor out({cout, lout});
  const double* X = xv.data();
  const double* W = wv.data();
  double* Y = out.data();
  for (int o = 0; o < cout; ++o) {
    for (int t = 0; t < lout; ++t) {
      const int base = t * stride - padding;
      const int klo = base < 0 ? -base : 0;
      const int khi = std::min(ksz, len - base);
      double acc = 0.0;
      for (int i = 0; i < cin; ++i) {
        acc += dot8(W + (o * cin + i) * ksz + klo, X + i * len + base + klo,
                    khi - klo);
      }
      Y[o * lout + t] = acc;
    }
  }
  return push(std::move(out), {input, weights},
              [cin, len, cout, ksz, lout, stride, padding](Tape& t, Node& self) {
                const Tensor& xv = t.value_of(self.parents[0]);
                const Tensor& wv = t.value_of(self.parents[1]);
                const double* G = self.grad.data();
                const bool want_x = t.wants_grad(self.parents[0]);
                const bool want_w = t.wants_grad(self.parents[1]);
                double* dX = want_x ? t.grad_buf(self.parents[0]).data() : nullptr;
                double* dW = want_w ? t.grad_buf(self.parents[1]).data() : nullptr;
                const double* X = xv.data();
                const double* W = wv.data();
                for (int o = 0; o < cout; ++o) {
                  for (int tt = 0; tt < lout; ++tt) {
                    const double g = G[o * lout + tt];
                    if (g == 0.0) continue;
                    const int base = tt * stride - padding;
                    for (int i = 0; i < cin; ++i) {
                      const double* wrow = W + (o * cin + i) * ksz;
                      const double* xrow = X + i * len;
                      double* dwrow = dW ? dW + (o * cin + i) * ksz : nullptr;
                      double* dxrow = dX ? dX + i * len : nullptr;
                      for (int kk = 0; kk < ksz; ++kk) {
                        const int pos = base + kk;
                        if (pos < 0 || pos >= len) continue;
                        if (dwrow) dwrow[kk] += g * xrow[pos];
                        if (dxrow) dxrow[pos] += g * wrow[kk];
                      }
                    }
                  }
                }
              });
}

Var Tape::add_channel_bias(Var x, Var b) {
  const Tensor& xv = value(x);
  const Tensor& bv = value(b);
  if (xv.rank() != 2 || bv.rank() != 1 || bv.dim(0) != xv.dim(0)) {
    throw DimensionError("add_channel_bias: incompatible shapes " +
                         xv.shape_str() + " and " + bv.shape_str());
  }
  const int c = xv.dim(0), l = xv.dim(1);
  Tensor out(xv.shape());
  for (int i = 0; i < c; ++i) {
    const double bi = bv.at(i);
    for (int t = 0; t < l; ++t) out.at(i, t) = xv.at(i, t) + bi;
  }
  return push(std::move(out), {x, b}, [c, l](Tape& t, Node& self) {
    if (t.wants_grad(self.parents[0])) {
      Tensor& g = t.grad_buf(self.parents[0]);
      const int n = self.grad.numel();
      for (int i = 0; i < n; ++i) g.at(i) += self.grad.at(i);
    }
    if (t.wants_grad(self.parents[1])) {
      Tensor& g = t.grad_buf(self.parents[1]);
      for (int i = 0; i < c; ++i) {
        double acc = 0.0;
        for (int tt = 0; tt < l; ++tt) acc += self.grad.at(i, tt);
        g.at(i) += acc;
      }
    }
  });
}

Var Tape::global_max_pool_time(Var x) {
  const Tensor& xv = value(x);
  if (xv.rank() != 2) {
    throw DimensionError("global_max_pool_time expects [C x L], got " +
                         xv.shape_str());
  }
  const int c = xv.dim(0), l = xv.dim(1);
  if (l < 1) throw DimensionError("global_max_pool_time: empty sequence");
  Tensor out({c});
  std::vector<int> argmax(static_cast<std::size_t>(c), 0);
  for (int i = 0; i < c; ++i) {
    double best = xv.at(i, 0);
    int bj = 0;
    for (int t = 1; t < l; ++t) {
      if (xv.at(i, t) > best) {  // strict: ties keep the earliest index
        best = xv.at(i, t);
        bj = t;
      }
    }
    out.at(i) = best;
    argmax[static_cast<std::size_t>(i)] = bj;
  }
  return push(std::move(out), {x}, [c, argmax](Tape& t, Node& self) {
    if (!t.wants_grad(self.parents[0])) return;
    Tensor& g = t.grad_buf(self.parents[0]);
    for (int i = 0; i < c; ++i) {
      g.at(i, argmax[static_cast<std::size_t>(i)]) += self.grad.at(i);
    }
  });
}

Var Tape::batchnorm_time(Var x, Var gamma, Var beta, double eps,
                         Tensor* batch_mean_out, Tensor* batch_var_out) {
  const Tensor& xv = value(x);
  const Tensor& gv = value(gamma);
  const Tensor& bv = value(beta);
  if (xv.rank() != 2 || gv.dim(0) != xv.dim(0) || bv.dim(0) != xv.dim(0)) {
    throw DimensionError("batchnorm_time: incompatible shapes " +
                         xv.shape_str() + ", " + gv.shape_str() + ", " +
                         bv.shape_str());
  }
  const int c = xv.dim(0), l = xv.dim(1);
  Tensor mean({c}), var({c});
  Tensor out(xv.shape());
  for (int i = 0; i < c; ++i) {
    double m = 0.0;
    for (int t = 0; t < l; ++t) m += xv.at(i, t);
    m /= l;
    double v = 0.0;
    for (int t = 0; t < l; ++t) {
      const double d = xv.at(i, t) - m;
      v += d * d;
    }
    v /= l;
    mean.at(i) = m;
    var.at(i) = v;
    const double inv = 1.0 / std::sqrt(v + eps);
    for (int t = 0; t < l; ++t) {
      out.at(i, t) = gv.at(i) * (xv.at(i, t) - m) * inv + bv.at(i);
    }
  }
  if (batch_mean_out) *batch_mean_out = mean;
  if (batch_var_out) *batch_var_out = var;
  return push(std::move(out), {x, gamma, beta},
              [c, l, eps, mean, var](Tape& t, Node& self) {
                const Tensor& xv = t.value_of(self.parents[0]);
                const Tensor& gv = t.value_of(self.parents[1]);
                const bool want_x = t.wants_grad(self.parents[0]);
                const bool want_g = t.wants_grad(self.parents[1]);
                const bool want_b = t.wants_grad(self.parents[2]);
                for (int i = 0; i < c; ++i) {
                  const double m = mean.at(i);
                  const double inv = 1.0 / std::sqrt(var.at(i) + eps);
                  double sum_g = 0.0, sum_gx = 0.0;
                  for (int tt = 0; tt < l; ++tt) {
                    const double gy = self.grad.at(i, tt);
                    sum_g += gy;
                    sum_gx += gy * (xv.at(i, tt) - m) * inv;
                  }
                  if (want_b) t.grad_buf(self.parents[2]).at(i) += sum_g;
                  if (want_g) t.grad_buf(self.parents[1]).at(i) += sum_gx;
                  if (want_x) {
                    Tensor& gx = t.grad_buf(self.parents[0]);
                    const double gi = gv.at(i);
                    for (int tt = 0; tt < l; ++tt) {
                      const double xhat = (xv.at(i, tt) - m) * inv;
                      const double gy = self.grad.at(i, tt);
                      gx.at(i, tt) +=
                          gi * inv * (gy - sum_g / l - xhat * sum_gx / l);
                    }
                  }
                }
              });
}

Var Tape::batchnorm_time_eval(Var x, Var gamma, Var beta,
                              const Tensor& running_mean,
                              const Tensor& running_var, double eps) {
  const Tensor& xv = value(x);
  const Tensor& gv = value(gamma);
  const Tensor& bv = value(beta);
  const int c = xv.dim(0), l = xv.dim(1);
  if (running_mean.numel() != c || running_var.numel() != c ||
      gv.dim(0) != c || bv.dim(0) != c) {
    throw DimensionError("batchnorm_time_eval: incompatible shapes");
  }
  Tensor out(xv.shape());
  std::vector<double> inv(static_cast<std::size_t>(c));
  for (int i = 0; i < c; ++i) {
    inv[static_cast<std::size_t>(i)] = 1.0 / std::sqrt(running_var.at(i) + eps);
    for (int t = 0; t < l; ++t) {
      out.at(i, t) = gv.at(i) * (xv.at(i, t) - running_mean.at(i)) *
                         inv[static_cast<std::size_t>(i)] +
                     bv.at(i);
    }
  }
  Tensor rm = running_mean;
  return push(std::move(out), {x, gamma, beta},
              [c, l, inv, rm, eps](Tape& t, Node& self) {
                const Tensor& xv = t.value_of(self.parents[0]);
                const Tensor& gv = t.value_of(self.parents[1]);
                for (int i = 0; i < c; ++i) {
                  const double iv = inv[static_cast<std::size_t>(i)];
                  double sum_g = 0.0, sum_gx = 0.0;
                  for (int tt = 0; tt < l; ++tt) {
                    const double gy = self.grad.at(i, tt);
                    sum_g += gy;
                    sum_gx += gy * (xv.at(i, tt) - rm.at(i)) * iv;
                  }
                  if (t.wants_grad(self.parents[2]))
                    t.grad_buf(self.parents[2]).at(i) += sum_g;
                  if (t.wants_grad(self.parents[1]))
                    t.grad_buf(self.parents[1]).at(i) += sum_gx;
                  if (t.wants_grad(self.parents[0])) {
                    Tensor& gx = t.grad_buf(self.parents[0]);
                    for (int tt = 0; tt < l; ++tt) {
                      gx.at(i, tt) += self.grad.at(i, tt) * gv.at(i) * iv;
                    }
                  }
                }
              });
}

Var Tape::dropout_mul(Var x, Tensor mask) {
  const Tensor& xv = value(x);
  check_same_shape(xv, mask, "dropout_mul");
  Tensor out(xv.shape());
  const int n = xv.numel();
  for (int i = 0; i < n; ++i) out.at(i) = xv.at(i) * mask.at(i);
  return push(std::move(out), {x}, [mask](Tape& t, Node& self) {
    if (!t.wants_grad(self.parents[0])) return;
    Tensor& g = t.grad_buf(self.parents[0]);
    const int n = self.grad.numel();
    for (int i = 0; i < n; ++i) g.at(i) += self.grad.at(i) * mask.at(i);
  });
}

// ---------------------------------------------------------------------------
// model-specific fused ops
// ---------------------------------------------------------------------------

Var Tape::buffer_shift(Var s, Var u) {
  const Tensor& sv = value(s);
  const Tensor& uv = value(u);
  if (sv.rank() != 2 || uv.rank() != 1 || uv.dim(0) != sv.dim(0)) {
    throw DimensionError("buffer_shift: incompatible shapes " + sv.shape_str() +
                         " and " + uv.shape_str());
  }
  const int d = sv.dim(0), k = sv.dim(1);
  Tensor out(sv.shape());
  for (int r = 0; r < d; ++r) {
    out.at(r, 0) = uv.at(r);
    for (int c = 1; c < k; ++c) out.at(r, c) = sv.at(r, c - 1);
  }
  return push(std::move(out), {s, u}, [d, k](Tape& t, Node& self) {
    if (t.wants_grad(self.parents[0])) {
      Tensor& g = t.grad_buf(self.parents[0]);
      for (int r = 0; r < d; ++r) {
        for (int c = 1; c < k; ++c) g.at(r, c - 1) += self.grad.at(r, c);
      }
    }
    if (t.wants_grad(self.parents[1])) {
      Tensor& g = t.grad_buf(self.parents[1]);
      for (int r = 0; r < d; ++r) g.at(r) += self.grad.at(r, 0);
    }
  });
}

Var Tape::add_col_broadcast(Var s, Var v) {
  const Tensor& sv = value(s);
  const Tensor& vv = value(v);
  if (sv.rank() != 2 || vv.rank() != 1 || vv.dim(0) != sv.dim(0)) {
    throw DimensionError("add_col_broadcast: incompatible shapes " +
                         sv.shape_str() + " and " + vv.shape_str());
  }
  const int d = sv.dim(0), k = sv.dim(1);
  Tensor out(sv.shape());
  for (int r = 0; r < d; ++r) {
    const double vr = vv.at(r);
    for (int c = 0; c < k; ++c) out.at(r, c) = sv.at(r, c) + vr;
  }
  return push(std::move(out), {s, v}, [d, k](Tape& t, Node& self) {
    if (t.wants_grad(self.parents[0])) {
      Tensor& g = t.grad_buf(self.parents[0]);
      const int n = self.grad.numel();
      for (int i = 0; i < n; ++i) g.at(i) += self.grad.at(i);
    }
    if (t.wants_grad(self.parents[1])) {
      Tensor& g = t.grad_buf(self.parents[1]);
      for (int r = 0; r < d; ++r) {
        double acc = 0.0;
        for (int c = 0; c < k; ++c) acc += self.grad.at(r, c);
        g.at(r) += acc;
      }
    }
  });
}

Var Tape::rows_gather(Var table, std::vector<int> ids) {
  const Tensor& tv = value(table);
  if (tv.rank() != 2) {
    throw DimensionError("rows_gather expects a matrix, got " + tv.shape_str());
  }
  const int rows = tv.dim(0), width = tv.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= rows) {
      throw DimensionError("rows_gather: id " + std::to_string(id) +
                           " out of range [0, " + std::to_string(rows) + ")");
    }
  }
  const int n = static_cast<int>(ids.size());
  Tensor out({n, width});
  for (int i = 0; i < n; ++i) {
    std::memcpy(out.data() + i * width,
                tv.data() + ids[static_cast<std::size_t>(i)] * width,
                static_cast<std::size_t>(width) * sizeof(double));
  }
  return push(std::move(out), {table}, [ids, width](Tape& t, Node& self) {
    if (!t.wants_grad(self.parents[0])) return;
    Tensor& g = t.grad_buf(self.parents[0]);
    const int n = static_cast<int>(ids.size());
    for (int i = 0; i < n; ++i) {
      double* grow = g.data() + ids[static_cast<std::size_t>(i)] * width;
      const double* srow = self.grad.data() + i * width;
      for (int j = 0; j < width; ++j) grow[j] += srow[j];
    }
  });
}

Var Tape::weighted_rowsum(Var rows, Var weights) {
  const Tensor& rv = value(rows);
  const Tensor& wv = value(weights);
  if (rv.rank() != 2 || wv.rank() != 1 || wv.dim(0) != rv.dim(0)) {
    throw DimensionError("weighted_rowsum: incompatible shapes " +
                         rv.shape_str() + " and " + wv.shape_str());
  }
  const int n = rv.dim(0), d = rv.dim(1);
  Tensor out({d});
  for (int j = 0; j < n; ++j) {
    const double w = wv.at(j);
    const double* row = rv.data() + j * d;
    for (int i = 0; i < d; ++i) out.at(i) += w * row[i];
  }
  return push(std::move(out), {rows, weights}, [n, d](Tape& t, Node& self) {
    const Tensor& rv = t.value_of(self.parents[0]);
    const Tensor& wv = t.value_of(self.parents[1]);
    const double* G = self.grad.data();
    if (t.wants_grad(self.parents[0])) {
      double* dR = t.grad_buf(self.parents[0]).data();
      for (int j = 0; j < n; ++j) {
        const double w = wv.at(j);
        double* drow = dR + j * d;
        for (int i = 0; i < d; ++i) drow[i] += w * G[i];
      }
    }
    if (t.wants_grad(self.parents[1])) {
      Tensor& dW = t.grad_buf(self.parents[1]);
      for (int j = 0; j < n; ++j) {
        const double* row = rv.data() + j * d;
        double acc = 0.0;
        for (int i = 0; i < d; ++i) acc += row[i] * G[i];
        dW.at(j) += acc;
      }
    }
  });
}

Var Tape::div_vec_scalar(Var v, Var s, double eps) {
  const Tensor& vv = value(v);
  const Tensor& sv = value(s);
  if (sv.rank() != 0) {
    throw DimensionError("div_vec_scalar: denominator must be rank 0, got " +
                         sv.shape_str());
  }
  // Floor the denominator at eps; division is exact whenever s >= eps.
  const bool floored = sv.at(0) < eps;
  const double denom = floored ? eps : sv.at(0);
  const int n = vv.numel();
  Tensor out(vv.shape());
  for (int i = 0; i < n; ++i) out.at(i) = vv.at(i) / denom;
  return push(std::move(out), {v, s}, [denom, floored](Tape& t, Node& self) {
    const int n = self.grad.numel();
    if (t.wants_grad(self.parents[0])) {
      Tensor& g = t.grad_buf(self.parents[0]);
      for (int i = 0; i < n; ++i) g.at(i) += self.grad.at(i) / denom;
    }
    if (t.wants_grad(self.parents[1]) && !floored) {
      // d/ds (v_i/s) = -v_i/s^2 = -y_i/s
      double acc = 0.0;
      for (int i = 0; i < n; ++i) acc += self.grad.at(i) * self.value.at(i);
      t.grad_buf(self.parents[1]).at(0) -= acc / denom;
    }
  });
}

Var Tape::gmm_scores(Var locations, Var widths, Var component_weights,
                     int length) {
  const Tensor& lv = value(locations);
  const Tensor& wv = value(widths);
  const Tensor& cv = value(component_weights);
  if (lv.rank() != 1 || !lv.same_shape(wv) || !lv.same_shape(cv)) {
    throw DimensionError("gmm_scores: component shapes disagree: " +
                         lv.shape_str() + ", " + wv.shape_str() + ", " +
                         cv.shape_str());
  }
  if (length < 1) throw DimensionError("gmm_scores: empty position range");
  const int kc = lv.dim(0);
  Tensor out({length});
  Tensor kernels({kc, length});  // saved for backward
  for (int i = 0; i < kc; ++i) {
    const double loc = lv.at(i);
    const double w = wv.at(i);
    const double cw = cv.at(i);
    for (int j = 0; j < length; ++j) {
      const double d = loc - j;
      const double e = std::exp(-d * d / (2.0 * w * w));
      kernels.at(i, j) = e;
      out.at(j) += cw * e;
    }
  }
  return push(std::move(out), {locations, widths, component_weights},
              [kc, length, kernels](Tape& t, Node& self) {
                const Tensor& lv = t.value_of(self.parents[0]);
                const Tensor& wv = t.value_of(self.parents[1]);
                const Tensor& cv = t.value_of(self.parents[2]);
                const bool want_l = t.wants_grad(self.parents[0]);
                const bool want_w = t.wants_grad(self.parents[1]);
                const bool want_c = t.wants_grad(self.parents[2]);
                for (int i = 0; i < kc; ++i) {
                  const double loc = lv.at(i);
                  const double w = wv.at(i);
                  const double cw = cv.at(i);
                  double dl = 0.0, dw = 0.0, dc = 0.0;
                  for (int j = 0; j < length; ++j) {
                    const double g = self.grad.at(j);
                    if (g == 0.0) continue;
                    const double e = kernels.at(i, j);
                    const double d = loc - j;
                    dl += g * cw * e * (-d / (w * w));
                    dw += g * cw * e * (d * d / (w * w * w));
                    dc += g * e;
                  }
                  if (want_l) t.grad_buf(self.parents[0]).at(i) += dl;
                  if (want_w) t.grad_buf(self.parents[1]).at(i) += dw;
                  if (want_c) t.grad_buf(self.parents[2]).at(i) += dc;
                }
              });
}

}  // namespace vloop
