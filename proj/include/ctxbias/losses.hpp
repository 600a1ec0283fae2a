#pragma once

// Training losses over one utterance's phrase batch. Index 0 of every batch
// is the empty phrase; it is excluded from the log loss but competes like any
// other candidate in the discriminative term.

#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ctxbias/core.hpp"
#include "ctxbias/decoder.hpp"
#include "ctxbias/numerics.hpp"

namespace ctxbias {

inline void check_loss_sizes(std::size_t n, std::size_t labels) {
  if (n == 0) throw ConfigMismatchError("loss needs at least the empty phrase");
  if (n != labels) throw ConfigMismatchError("phrase count and label count differ");
}

/// Negative log-likelihood of the labeled phrases, empty phrase excluded.
inline double log_loss(const Eigen::VectorXd& log_probs, std::span<const PhraseLabel> labels) {
  check_loss_sizes(std::size_t(log_probs.size()), labels.size());
  double loss = 0.0;
  for (Eigen::Index i = 1; i < log_probs.size(); ++i)
    if (labels[i]) loss -= log_probs[i];
  return loss;
}

/// Cross-entropy between the labels and a softmax over per-token scores,
/// empty phrase included.
inline double disc_loss(const Eigen::VectorXd& scores, std::span<const PhraseLabel> labels) {
  check_loss_sizes(std::size_t(scores.size()), labels.size());
  const double lse = logsumexp(scores);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < scores.size(); ++i)
    if (labels[i]) loss -= scores[i] - lse;
  return loss;
}

/// Gradient of disc_loss with respect to each per-token score.
inline Eigen::VectorXd disc_loss_grad(const Eigen::VectorXd& scores,
                                      std::span<const PhraseLabel> labels) {
  check_loss_sizes(std::size_t(scores.size()), labels.size());
  double label_sum = 0.0;
  for (PhraseLabel l : labels) label_sum += double(l);
  const double lse = logsumexp(scores);
  Eigen::VectorXd g(scores.size());
  for (Eigen::Index i = 0; i < scores.size(); ++i)
    g[i] = std::exp(scores[i] - lse) * label_sum - double(labels[i]);
  return g;
}

inline void check_beta(double beta) {
  if (!(beta >= 0.0 && beta <= 1.0))
    throw ConfigMismatchError("beta must lie in [0, 1], got " + std::to_string(beta));
}

inline double combined_loss(double log_l, double disc_l, double beta) {
  check_beta(beta);
  return (1.0 - beta) * log_l + beta * disc_l;
}

struct LossReport {
  double log_loss = 0.0;
  double disc_loss = 0.0;
  double combined = 0.0;
};

inline LossReport compute_losses(std::span<const ScoredPhrase> scored,
                                 std::span<const PhraseLabel> labels, double beta) {
  Eigen::VectorXd log_probs(scored.size());
  Eigen::VectorXd scores(scored.size());
  for (std::size_t i = 0; i < scored.size(); ++i) {
    log_probs[Eigen::Index(i)] = scored[i].log_prob;
    scores[Eigen::Index(i)] = scored[i].per_token;
  }
  LossReport r;
  r.log_loss = log_loss(log_probs, labels);
  r.disc_loss = disc_loss(scores, labels);
  r.combined = combined_loss(r.log_loss, r.disc_loss, beta);
  return r;
}

}  // namespace ctxbias
