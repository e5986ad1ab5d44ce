#include "amtidin/ad/optim.hpp"

#include <algorithm>
#include <cmath>

namespace amtidin::ad {

template <typename S>
void adam_step(const std::vector<Parameter<S>*>& params, AdamState<S>& st) {
  if (st.m.size() != params.size()) {
    st.m.clear();
    st.v.clear();
    for (auto* p : params) {
      st.m.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
      st.v.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
    }
    st.step = 0;
  }
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  const S b1 = static_cast<S>(st.beta1), b2 = static_cast<S>(st.beta2);
  const S step_size = static_cast<S>(st.lr / bc1);
  const S inv_sqrt_bc2 = static_cast<S>(1.0 / std::sqrt(bc2));
  const S eps = static_cast<S>(st.eps);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto* p = params[k];
    if (st.m[k].rows() != p->grad.rows() || st.m[k].cols() != p->grad.cols())
      throw ShapeError("adam_step: moment shape does not match parameter " + p->name);
    st.m[k] = b1 * st.m[k] + (S(1) - b1) * p->grad;
    st.v[k] = b2 * st.v[k] + (S(1) - b2) * p->grad.cwiseAbs2();
    p->value.array() -= step_size * st.m[k].array() / (st.v[k].array().sqrt() * inv_sqrt_bc2 + eps);
  }
}

template <typename S>
void zero_grad(const std::vector<Parameter<S>*>& params) {
  for (auto* p : params) p->zero_grad();
}

template <typename S>
double grad_norm(const std::vector<Parameter<S>*>& params) {
  double s = 0.0;
  for (auto* p : params) s += p->grad.template cast<double>().squaredNorm();
  return std::sqrt(s);
}

template <typename S>
double clip_grad_norm(const std::vector<Parameter<S>*>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const S c = static_cast<S>(max_norm / (norm + 1e-6));
    for (auto* p : params) p->grad *= c;
  }
  return norm;
}

bool PlateauScheduler::step(double metric) {
  if (metric < best - threshold * std::abs(best) || (std::isinf(best) && std::isfinite(metric))) {
    best = metric;
    bad_epochs = 0;
    return false;
  }
  ++bad_epochs;
  if (bad_epochs >= patience) {
    const double next = std::max(lr * factor, min_lr);
    bad_epochs = 0;
    const bool reduced = next < lr;
    lr = next;
    return reduced;
  }
  return false;
}

template void adam_step(const std::vector<Parameter<float>*>&, AdamState<float>&);
template void adam_step(const std::vector<Parameter<double>*>&, AdamState<double>&);
template void zero_grad(const std::vector<Parameter<float>*>&);
template void zero_grad(const std::vector<Parameter<double>*>&);
template double grad_norm(const std::vector<Parameter<float>*>&);
template double grad_norm(const std::vector<Parameter<double>*>&);
template double clip_grad_norm(const std::vector<Parameter<float>*>&, double);
template double clip_grad_norm(const std::vector<Parameter<double>*>&, double);

}  // namespace amtidin::ad
