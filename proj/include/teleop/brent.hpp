#pragma once

#include <cmath>
#include <functional>

namespace teleop {

struct ScalarMin {
  double x = 0.0;
  double fx = 0.0;
  int iterations = 0;
  int evaluations = 0;
};

/// Brent's method (golden section + successive parabolic interpolation) for a
/// local minimum of f on [a, b], started from x0 in [a, b]. Stops when the
/// bracket around the best point shrinks below 2 * (tol + 1e-12) or after
/// max_iter iterations.
inline ScalarMin brent_minimize(const std::function<double(double)>& f, double a, double b, double x0,
                                double tol, int max_iter) {
  constexpr double kGolden = 0.3819660112501051;  // (3 - sqrt(5)) / 2
  constexpr double kEps = 1e-12;
  ScalarMin r;
  double x = x0, w = x0, v = x0;
  double fx = f(x0);
  ++r.evaluations;
  double fw = fx, fv = fx;
  double d = 0.0, e = 0.0;
  for (r.iterations = 0; r.iterations < max_iter; ++r.iterations) {
    const double m = 0.5 * (a + b);
    const double tol1 = tol + kEps;
    const double tol2 = 2.0 * tol1;
    if (std::abs(x - m) <= tol2 - 0.5 * (b - a)) break;
    bool golden = true;
    if (std::abs(e) > tol1) {
      // Parabola through (v, fv), (w, fw), (x, fx).
      double rr = (x - w) * (fx - fv);
      double qq = (x - v) * (fx - fw);
      double pp = (x - v) * qq - (x - w) * rr;
      qq = 2.0 * (qq - rr);
      if (qq > 0.0) pp = -pp;
      qq = std::abs(qq);
      const double etemp = e;
      e = d;
      if (std::abs(pp) < std::abs(0.5 * qq * etemp) && pp > qq * (a - x) && pp < qq * (b - x)) {
        d = pp / qq;
        const double u = x + d;
        if (u - a < tol2 || b - u < tol2) d = (m >= x) ? tol1 : -tol1;
        golden = false;
      }
    }
    if (golden) {
      e = (x >= m) ? a - x : b - x;
      d = kGolden * e;
    }
    const double u = (std::abs(d) >= tol1) ? x + d : x + (d > 0 ? tol1 : -tol1);
    const double fu = f(u);
    ++r.evaluations;
    if (fu <= fx) {
      if (u >= x) a = x; else b = x;
      v = w; fv = fw;
      w = x; fw = fx;
      x = u; fx = fu;
    } else {
      if (u < x) a = u; else b = u;
      if (fu <= fw || w == x) {
        v = w; fv = fw;
        w = u; fw = fu;
      } else if (fu <= fv || v == x || v == w) {
        v = u; fv = fu;
      }
    }
  }
  r.x = x;
  r.fx = fx;
  return r;
}

}  // namespace teleop
