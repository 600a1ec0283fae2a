#pragma once

// Reverse-mode gradients for the biasing decoder. The backward pass walks the
// forward trace layer by layer and accumulates parameter gradients into a
// DecoderParams-shaped container, so optimizer code can pair parameters and
// gradients through the shared for_each_tensor order.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ctxbias/core.hpp"
#include "ctxbias/decoder.hpp"
#include "ctxbias/losses.hpp"
#include "ctxbias/numerics.hpp"

namespace ctxbias {

inline Eigen::MatrixXd layer_norm_backward(const Eigen::MatrixXd& dy, const Eigen::MatrixXd& y,
                                           const Eigen::VectorXd& istd) {
  Eigen::MatrixXd dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double mean_dy = dy.row(r).mean();
    const double mean_dyy = (dy.row(r).array() * y.row(r).array()).mean();
    dx.row(r) = (istd[r] * (dy.row(r).array() - mean_dy - y.row(r).array() * mean_dyy)).matrix();
  }
  return dx;
}

/// Computes the combined loss for one utterance's phrase batch and adds its
/// parameter gradients into `grads`. phrases[0] must be the empty phrase.
inline LossReport loss_gradients(const DecoderParams& params, const EncoderCache& cache,
                                 std::span<const Phrase> phrases,
                                 std::span<const PhraseLabel> labels, double beta,
                                 DecoderParams& grads) {
  check_beta(beta);
  check_loss_sizes(phrases.size(), labels.size());
  if (!phrases[0].is_empty())
    throw InvalidPhraseError("phrase batch must put the empty phrase at index 0");
  if (!(grads.config == params.config))
    throw ConfigMismatchError("gradient container does not match parameter shapes");

  const DecoderConfig& cfg = params.config;
  const int heads = cfg.num_heads;
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(double(dh));

  const ScoringBatch batch = make_scoring_batch(phrases);
  ForwardTrace trace;
  const Eigen::MatrixXd lp = forward_packed(params, cache, batch.packed, &trace);
  const int rows = batch.packed.rows();
  const Eigen::Index count = Eigen::Index(phrases.size());

  Eigen::VectorXd log_probs(count), scores(count);
  for (Eigen::Index i = 0; i < count; ++i) {
    const int off = batch.packed.offset(int(i)), n = batch.packed.length(int(i));
    double sum = 0.0;
    for (int t = 0; t < n; ++t) sum += lp(off + t, batch.targets[off + t]);
    log_probs[i] = sum;
    scores[i] = sum / double(n);
  }

  LossReport report;
  report.log_loss = log_loss(log_probs, labels);
  report.disc_loss = disc_loss(scores, labels);
  report.combined = combined_loss(report.log_loss, report.disc_loss, beta);

  // dL/dlogP_i, combining both loss terms. The discriminative part goes
  // through s_i = logP_i / L_i, hence the division by the length.
  const Eigen::VectorXd dscores = disc_loss_grad(scores, labels);
  Eigen::VectorXd c(count);
  for (Eigen::Index i = 0; i < count; ++i) {
    const double len = double(batch.packed.length(int(i)));
    c[i] = beta * dscores[i] / len;
    if (i >= 1 && labels[i]) c[i] -= (1.0 - beta);
  }

  // Through the log-softmax: d logP(target) / d logit_k = [k == target] - p_k.
  Eigen::MatrixXd dlogits(rows, cfg.vocab_size);
  for (Eigen::Index i = 0; i < count; ++i) {
    const int off = batch.packed.offset(int(i)), n = batch.packed.length(int(i));
    for (int t = 0; t < n; ++t) {
      const int r = off + t;
      dlogits.row(r) = (-c[i]) * lp.row(r).array().exp().matrix();
      dlogits(r, batch.targets[r]) += c[i];
    }
  }

  grads.out_b.row(0) += dlogits.colwise().sum();
  grads.out_w.noalias() += trace.lnf_y.transpose() * dlogits;
  Eigen::MatrixXd dz =
      layer_norm_backward(dlogits * params.out_w.transpose(), trace.lnf_y, trace.lnf_istd);

  for (int li = cfg.num_layers - 1; li >= 0; --li) {
    const auto& l = params.layers[li];
    auto& gl = grads.layers[li];
    const LayerTrace& lt = trace.layers[li];

    // Feed-forward block.
    gl.ff_b2.row(0) += dz.colwise().sum();
    gl.ff_w2.noalias() += lt.ff_g.transpose() * dz;
    Eigen::MatrixXd du = dz * l.ff_w2.transpose();
    du.array() *= lt.ff_u.unaryExpr([](double x) { return gelu_grad(x); }).array();
    gl.ff_b1.row(0) += du.colwise().sum();
    gl.ff_w1.noalias() += lt.ln3_y.transpose() * du;
    dz += layer_norm_backward(du * l.ff_w1.transpose(), lt.ln3_y, lt.ln3_istd);

    // Cross-attention block.
    gl.ca_wo.noalias() += lt.ca_ctx.transpose() * dz;
    {
      const Eigen::MatrixXd dctx = dz * l.ca_wo.transpose();
      Eigen::MatrixXd dq = Eigen::MatrixXd::Zero(rows, cfg.model_dim);
      Eigen::MatrixXd dk = Eigen::MatrixXd::Zero(cache.num_frames(), cfg.model_dim);
      Eigen::MatrixXd dv = Eigen::MatrixXd::Zero(cache.num_frames(), cfg.model_dim);
      for (int h = 0; h < heads; ++h) {
        const auto dctx_h = dctx.middleCols(h * dh, dh);
        const Eigen::MatrixXd& w = lt.ca_w[h];
        dv.middleCols(h * dh, dh).noalias() += w.transpose() * dctx_h;
        Eigen::MatrixXd dw = dctx_h * cache.v[li].middleCols(h * dh, dh).transpose();
        Eigen::MatrixXd ds(rows, w.cols());
        for (int r = 0; r < rows; ++r) ds.row(r) = softmax_backward(w.row(r), dw.row(r));
        ds *= scale;
        dq.middleCols(h * dh, dh).noalias() += ds * cache.k[li].middleCols(h * dh, dh);
        dk.middleCols(h * dh, dh).noalias() += ds.transpose() * lt.ca_q.middleCols(h * dh, dh);
      }
      gl.ca_wq.noalias() += lt.ln2_y.transpose() * dq;
      gl.ca_wk.noalias() += cache.x.transpose() * dk;
      gl.ca_wv.noalias() += cache.x.transpose() * dv;
      dz += layer_norm_backward(dq * l.ca_wq.transpose(), lt.ln2_y, lt.ln2_istd);
    }

    // Causal self-attention block.
    gl.sa_wo.noalias() += lt.sa_ctx.transpose() * dz;
    {
      const Eigen::MatrixXd dctx = dz * l.sa_wo.transpose();
      Eigen::MatrixXd dq = Eigen::MatrixXd::Zero(rows, cfg.model_dim);
      Eigen::MatrixXd dk = Eigen::MatrixXd::Zero(rows, cfg.model_dim);
      Eigen::MatrixXd dv = Eigen::MatrixXd::Zero(rows, cfg.model_dim);
      for (int s = 0; s < batch.packed.count(); ++s) {
        const int off = batch.packed.offset(s), n = batch.packed.length(s);
        for (int h = 0; h < heads; ++h) {
          const Eigen::MatrixXd& w = lt.sa_w[std::size_t(s) * heads + h];
          const auto dctx_b = dctx.block(off, h * dh, n, dh);
          dv.block(off, h * dh, n, dh).noalias() += w.transpose() * dctx_b;
          const Eigen::MatrixXd dw =
              dctx_b * lt.sa_v.block(off, h * dh, n, dh).transpose();
          Eigen::MatrixXd ds = Eigen::MatrixXd::Zero(n, n);
          for (int i = 0; i < n; ++i)
            ds.row(i).head(i + 1) = softmax_backward(w.row(i).head(i + 1), dw.row(i).head(i + 1));
          ds *= scale;
          dq.block(off, h * dh, n, dh).noalias() += ds * lt.sa_k.block(off, h * dh, n, dh);
          dk.block(off, h * dh, n, dh).noalias() +=
              ds.transpose() * lt.sa_q.block(off, h * dh, n, dh);
        }
      }
      gl.sa_wq.noalias() += lt.ln1_y.transpose() * dq;
      gl.sa_wk.noalias() += lt.ln1_y.transpose() * dk;
      gl.sa_wv.noalias() += lt.ln1_y.transpose() * dv;
      dz += layer_norm_backward(
          dq * l.sa_wq.transpose() + dk * l.sa_wk.transpose() + dv * l.sa_wv.transpose(),
          lt.ln1_y, lt.ln1_istd);
    }
  }

  const double emb_scale = std::sqrt(double(params.config.model_dim));
  for (int r = 0; r < rows; ++r)
    grads.embed.row(batch.packed.tokens[r]) += emb_scale * dz.row(r);

  if (!std::isfinite(report.combined)) throw NumericalError("non-finite training loss");
  return report;
}

}  // namespace ctxbias
