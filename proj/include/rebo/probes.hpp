// Constructed instances that probe meta-gradient behavior.
//
// The shared-validation construction realizes the degenerate regime of a
// bi-level formulation whose outer objective reuses the inner labeled
// data: with the task parameters at a stationary point of the labeled
// loss, the validation gradient at the virtual step collapses and the
// approximate hypergradient is numerically dead no matter what the
// predictor says — the weight predictor receives no training signal. A
// held-out validation batch from a shifted distribution restores the
// signal at the same task parameters. The contrast is the reason the
// outer objective lives on held-out data.
//
// The construction pins the stationary point exactly:
//   - the labeled batch is one all-zero cloud under two conflicting
//     labels; identical forward passes make the per-sample gradients
//     exact negations, so the batch gradient cancels bitwise;
//   - encoder biases sit at -0.1, so the zero cloud leaves every relu
//     dead with margin and its logits equal the final classifier bias in
//     a whole neighborhood of theta — the labeled loss is locally a
//     function of two scalars;
//   - the classifier is a single linear layer whose columns are opposite
//     multiples of one direction, scaled so every unlabeled cloud is
//     predicted with a logit gap in a band [4.5, 8]: consistency terms
//     stay live but carry small gradients, keeping the virtual step's
//     drift away from the stationary point second-order.
#pragma once

#include <cstdint>
#include <vector>

#include "rebo/bilevel.hpp"
#include "rebo/models.hpp"
#include "rebo/rng.hpp"
#include "rebo/ssl_losses.hpp"

namespace rebo {

struct TrivialSolutionProbe {
  ModelConfig cfg;
  ParamSet theta;
  double alpha = 0.01;
  double threshold = 0.4;  // every 2-class prediction clears it

  Tensor labeled_cloud;                 // all-zero cloud, conflicting labels
  std::vector<LabeledView> shared_batch;
  std::vector<UnlabeledTerm> unlabeled;
  std::vector<Tensor> heldout_clouds;   // shifted distribution, labeled
  std::vector<LabeledView> heldout_batch;

  double labeled_grad_norm = 0.0;  // || grad_theta L_l || at theta
  double min_logit_gap = 0.0;      // over unlabeled clouds, weak and strong
  double max_logit_gap = 0.0;
};

inline TrivialSolutionProbe make_trivial_solution_probe(std::uint64_t seed) {
  TrivialSolutionProbe probe;
  probe.cfg.encoder_widths = {3, 6, 8, 8};
  probe.cfg.classifier_widths = {8, 2};  // single linear head
  probe.cfg.predictor_widths = {8, 4, 2, 1};

  probe.theta = init_task_params(seed, probe.cfg);
  // Dead margins for the zero cloud: generous at the input layer, thinner
  // deeper where live-cloud activations must survive. The margins only
  // need to exceed the virtual step's displacement (~alpha * grad).
  for (std::size_t l = 0; l + 1 < probe.cfg.encoder_widths.size(); ++l) {
    for (double& v : probe.theta.at(layer_name("enc", l, 'b')).vec())
      v = l == 0 ? -0.1 : -0.02;
  }

  probe.labeled_cloud = Tensor::zeros({8, 3});
  probe.shared_batch.push_back({&probe.labeled_cloud, 0});
  probe.shared_batch.push_back({&probe.labeled_cloud, 1});

  Rng rng(seed);
  Rng cloud_rng = rng.derive("unlabeled");
  std::vector<Tensor> clouds;
  for (int j = 0; j < 6; ++j) {
    Tensor cloud({12, 3});
    for (std::size_t i = 0; i < cloud.numel(); ++i)
      cloud[i] = cloud_rng.uniform(-1.0, 1.0);
    clouds.push_back(std::move(cloud));
  }

  // Classifier columns +-(g/2) w along one direction: the logit gap of a
  // cloud is g * (feature . w). Pick g so the median unlabeled gap is 6.
  Rng dir_rng = rng.derive("direction");
  std::vector<double> w(8);
  double wn = 0.0;
  for (double& v : w) {
    v = dir_rng.uniform(0.5, 1.0);  // positive: post-relu features align
    wn += v * v;
  }
  for (double& v : w) v /= std::sqrt(wn);
  std::vector<double> projections;
  for (const Tensor& cloud : clouds) {
    Tensor f = encode_global_value(probe.theta, cloud, probe.cfg);
    double p = 0.0;
    for (int i = 0; i < 8; ++i) p += f[i] * w[i];
    projections.push_back(p);
  }
  std::vector<double> sorted = projections;
  std::sort(sorted.begin(), sorted.end());
  const double median = 0.5 * (sorted[2] + sorted[3]);
  const double g = 6.0 / median;
  Tensor& cls_w = probe.theta.at(layer_name("cls", 0, 'w'));
  for (int i = 0; i < 8; ++i) {
    cls_w.at(i, 0) = 0.5 * g * w[i];
    cls_w.at(i, 1) = -0.5 * g * w[i];
  }

  for (int j = 0; j < 6; ++j) {
    UnlabeledTerm term;
    term.sample_id = 100 + j;
    term.weak_cloud = clouds[j];
    Rng arng = cloud_rng.derive("strong", j);
    term.strong_cloud =
        augment(clouds[j], AugmentSpec{0.15, 0.005, 0.0}, arng);
    term.feature = encode_global_value(probe.theta, clouds[j], probe.cfg);
    probe.unlabeled.push_back(std::move(term));
  }

  // Shifted validation: scaled-up clouds, all labeled with the class the
  // head never predicts; their gradients at theta are large.
  Rng val_rng = rng.derive("heldout");
  for (int k = 0; k < 6; ++k) {
    Tensor cloud({12, 3});
    for (std::size_t i = 0; i < cloud.numel(); ++i)
      cloud[i] = val_rng.uniform(-1.0, 1.0) * 12.0;
    probe.heldout_clouds.push_back(std::move(cloud));
  }
  for (int k = 0; k < 6; ++k) {
    probe.heldout_batch.push_back({&probe.heldout_clouds[k], 1});
  }

  {
    ad::Tape tape;
    ad::VarMap tv = tape.leaves(probe.theta);
    tape.backward(labeled_loss(tape, tv, probe.shared_batch, probe.cfg));
    probe.labeled_grad_norm = tape.leaf_gradients().l2_norm();
  }

  probe.min_logit_gap = 1e300;
  probe.max_logit_gap = 0.0;
  auto note_gap = [&](const Tensor& cloud) {
    Tensor f = encode_global_value(probe.theta, cloud, probe.cfg);
    Tensor logits = classify_value(probe.theta, f, probe.cfg);
    const double gap = logits[0] - logits[1];
    probe.min_logit_gap = std::min(probe.min_logit_gap, gap);
    probe.max_logit_gap = std::max(probe.max_logit_gap, gap);
  };
  for (const UnlabeledTerm& term : probe.unlabeled) {
    note_gap(term.weak_cloud);
    note_gap(term.strong_cloud);
  }
  return probe;
}

// Small SSL instance: 2 classes, 10 unlabeled samples, predictor under
// 100 scalars, confident predictions so every consistency term is live.
// Used to check the finite-difference hypergradient against the
// per-coordinate oracle.
struct SmallSslInstance {
  ModelConfig cfg;
  ParamSet theta, phi;
  Tensor l0, l1;
  std::vector<LabeledView> labeled;
  std::vector<UnlabeledTerm> unlabeled;
  std::vector<Tensor> val_clouds;
  std::vector<LabeledView> validation;
  double threshold = 0.3;
  double alpha = 0.01;

  BilevelProblem problem() const {
    BilevelProblem p;
    p.train_loss = [this](ad::Tape& tape, const ad::VarMap& tv,
                          const ad::VarMap& pv) {
      return training_loss(tape, tv, pv, labeled, unlabeled, threshold, cfg)
          .loss;
    };
    p.val_loss = [this](ad::Tape& tape, const ad::VarMap& tv) {
      return labeled_loss(tape, tv, validation, cfg);
    };
    return p;
  }
};

inline SmallSslInstance make_small_ssl_instance(std::uint64_t seed) {
  SmallSslInstance inst;
  inst.cfg.encoder_widths = {3, 6, 8, 8};
  inst.cfg.classifier_widths = {8, 6, 2};
  inst.cfg.predictor_widths = {8, 4, 2, 1};
  inst.theta = init_task_params(seed, inst.cfg);
  for (auto& [name, t] : inst.theta) {
    if (name.rfind("cls", 0) == 0)
      for (double& v : t.vec()) v *= 4.0;
  }
  inst.phi = init_predictor_params(seed + 1, inst.cfg);
  Rng rng(seed + 2);
  auto random_cloud = [&rng]() {
    Tensor t({16, 3});
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-1.0, 1.0);
    return t;
  };
  inst.l0 = random_cloud();
  inst.l1 = random_cloud();
  inst.labeled.push_back({&inst.l0, 0});
  inst.labeled.push_back({&inst.l1, 1});
  for (int j = 0; j < 10; ++j) {
    Tensor cloud = random_cloud();
    UnlabeledTerm term;
    term.sample_id = j;
    term.weak_cloud = cloud;
    Rng arng = rng.derive("aug", static_cast<std::uint64_t>(j));
    term.strong_cloud = augment(cloud, AugmentSpec{0.3, 0.02, 0.0}, arng);
    term.feature = encode_global_value(inst.theta, cloud, inst.cfg);
    inst.unlabeled.push_back(std::move(term));
  }
  for (int k = 0; k < 4; ++k) inst.val_clouds.push_back(random_cloud());
  for (int k = 0; k < 4; ++k)
    inst.validation.push_back({&inst.val_clouds[k], k % 2});
  return inst;
}

// Bi-level instance with closed-form mixed partials and curvature:
//   L_tr  = sum_i (phi B)_i sigmoid(theta_i) + 0.5 ||phi||^2
//   L_val = 0.5 ||theta - target||^2
// The nonzero third derivative of the sigmoid separates the forward and
// central finite-difference variants.
struct CurvedHvpInstance {
  std::size_t n = 10, m = 6;
  Tensor B;       // [m,n]
  Tensor target;  // [1,n]
  ParamSet theta, phi;
  double alpha = 0.05;

  BilevelProblem problem() const {
    BilevelProblem p;
    p.train_loss = [this](ad::Tape& tape, const ad::VarMap& tv,
                          const ad::VarMap& pv) {
      ad::Var s = ad::sigmoid(tv.at("theta"));
      ad::Var u = ad::matmul(pv.at("phi"), tape.constant(B));
      ad::Var cross = ad::sum(ad::mul(u, s));
      ad::Var sq =
          ad::scale(ad::sum(ad::mul(pv.at("phi"), pv.at("phi"))), 0.5);
      return ad::add(cross, sq);
    };
    p.val_loss = [this](ad::Tape& tape, const ad::VarMap& tv) {
      ad::Var d = ad::sub(tv.at("theta"), tape.constant(target));
      return ad::scale(ad::sum(ad::mul(d, d)), 0.5);
    };
    return p;
  }

  // -alpha * M v with M_ki = B_ki s'(theta_i) and v = theta* - target.
  ParamSet exact_meta_gradient() const {
    auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    const Tensor& th = theta.at("theta");
    const Tensor& ph = phi.at("phi");
    std::vector<double> u(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < m; ++k) u[i] += ph[k] * B.at(k, i);
    std::vector<double> theta_star(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double sp = sig(th[i]) * (1.0 - sig(th[i]));
      theta_star[i] = th[i] - alpha * u[i] * sp;
    }
    Tensor g({1, m});
    for (std::size_t k = 0; k < m; ++k) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double sp = sig(th[i]) * (1.0 - sig(th[i]));
        s += B.at(k, i) * sp * (theta_star[i] - target[i]);
      }
      g[k] = -alpha * s;
    }
    ParamSet out;
    out.insert("phi", g);
    return out;
  }
};

inline CurvedHvpInstance make_curved_hvp_instance(std::uint64_t seed) {
  CurvedHvpInstance inst;
  Rng rng(seed);
  auto random = [&rng](Shape shape, double lo, double hi) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
  };
  inst.B = random({inst.m, inst.n}, -1.0, 1.0);
  inst.target = random({1, inst.n}, -0.5, 0.5);
  Tensor th({1, inst.n});
  for (std::size_t i = 0; i < inst.n; ++i) th[i] = rng.uniform(0.4, 1.6);
  inst.theta.insert("theta", th);
  inst.phi.insert("phi", random({1, inst.m}, -1.0, 1.0));
  return inst;
}

inline BilevelProblem trivial_probe_problem(const TrivialSolutionProbe& probe,
                                            bool shared_validation) {
  BilevelProblem problem;
  problem.train_loss = [&probe](ad::Tape& tape, const ad::VarMap& tv,
                                const ad::VarMap& pv) {
    return training_loss(tape, tv, pv, probe.shared_batch, probe.unlabeled,
                         probe.threshold, probe.cfg)
        .loss;
  };
  if (shared_validation) {
    problem.val_loss = [&probe](ad::Tape& tape, const ad::VarMap& tv) {
      return labeled_loss(tape, tv, probe.shared_batch, probe.cfg);
    };
  } else {
    problem.val_loss = [&probe](ad::Tape& tape, const ad::VarMap& tv) {
      return labeled_loss(tape, tv, probe.heldout_batch, probe.cfg);
    };
  }
  return problem;
}

}  // namespace rebo
