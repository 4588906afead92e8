#pragma once

#include <Eigen/Dense>

#include "smmh/process_model.hpp"

namespace smmh {

// Four-state reference model with Q = 2 mark channels.
//
// The absorbing-state Hawkes parameters are estimates fitted on a real
// ICU cohort: stable (0.55, 0.2, 8.46), deteriorating (0.82, 0.16, 1.36).
// Everything else (transient Hawkes, Gamma sojourns, transitions, GP marks) is
// synthetic and chosen only to give a well separated test bed; none of it
// comes from data.
inline ModelParams reference_model() {
  ModelParams p;
  p.n_states = 4;
  p.transition.resize(4, 4);
  p.transition << 1.0, 0.0, 0.0, 0.0,
                  0.6, 0.0, 0.3, 0.1,
                  0.2, 0.2, 0.0, 0.6,
                  0.0, 0.0, 0.0, 1.0;
  p.initial.resize(4);
  p.initial << 0.0, 0.6, 0.4, 0.0;

  Eigen::MatrixXd cov(2, 2);
  cov << 1.0, 0.3, 0.3, 1.0;
  auto gp = [&](double m0, double m1) {
    GpParams g;
    g.mean = Eigen::Vector2d(m0, m1);
    g.smoothness = 1;
    g.length_scale = 0.3;
    g.channel_cov = cov;
    g.jitter = default_jitter(cov);
    return g;
  };

  // Sojourn shapes are large so every segment carries enough events for
  // change-point detection; the mark means sit six standard deviations apart.
  p.states.resize(4);
  p.states[0] = {{25.0, 0.8}, {0.55, 0.2, 8.46}, gp(0.0, 0.0)};
  p.states[1] = {{25.0, 0.96}, {0.6, 0.1, 2.0}, gp(6.0, 0.0)};
  p.states[2] = {{25.0, 0.96}, {0.9, 0.1, 2.0}, gp(0.0, 6.0)};
  p.states[3] = {{25.0, 0.48}, {0.82, 0.16, 1.36}, gp(6.0, 6.0)};
  return p;
}

}  // namespace smmh
