#!/usr/bin/env python3
"""
Energy pruning: how a trained task's factors get small.

A task's weight contribution is stored as U diag(sigma) V^T. The squared
singular values are energies; keeping the smallest prefix whose share of
the total reaches 1 - e bounds the reconstruction error exactly, because
dropping the tail past k costs sum_{i>k} sigma_i^2 in squared Frobenius
norm. This script factorizes a noisy low-rank matrix and walks the
threshold from aggressive to lossless.
"""

import numpy as np

import factorcl as fc
import factorcl.linalg as la


def main():
    rng = np.random.default_rng(11)

    # planted rank-4 signal under broadband noise
    rows, cols, planted = 24, 60, 4
    signal = (rng.normal(size=(rows, planted)) @ rng.normal(size=(planted, cols)))
    noisy = (signal * 2.0 + rng.normal(size=(rows, cols)) * 0.05).astype(np.float32)

    f = la.svd(noisy)
    energy = f.sigma.astype(np.float64) ** 2
    share = np.cumsum(energy) / energy.sum()
    print("leading cumulative energy shares:")
    for k in range(min(8, f.rank)):
        print(f"  k={k + 1:2d}  sigma={f.sigma[k]:8.4f}  share={share[k]:.6f}")

    print("\npruning at decreasing thresholds:")
    for e in (1e-1, 1e-2, 1e-3, 1e-5, 0.0):
        k = fc.retained_rank(f.sigma, fc.PruneConfig(energy_e=e))
        err = float(np.linalg.norm(noisy - la.rank_k_approx(f, k)))
        rel = err / float(np.linalg.norm(noisy))
        print(f"  e={e:7.0e}  rank {f.rank:2d} -> {k:2d}  relative error {rel:.6f}")

    # the identity that justifies the rule: tail energy = squared error
    k = fc.retained_rank(f.sigma, fc.PruneConfig(energy_e=1e-2))
    lhs = float(np.linalg.norm(noisy.astype(np.float64)
                               - la.rank_k_approx(f, k).astype(np.float64)) ** 2)
    rhs = float(energy[k:].sum())
    print(f"\nat e=1e-2 (k={k}): ||A - A_k||^2 = {lhs:.6f}, tail energy = {rhs:.6f}")
    print(f"mismatch relative to total energy: {abs(lhs - rhs) / energy.sum():.2e}")

    # the planted rank survives moderate thresholds
    k_mid = fc.retained_rank(f.sigma, fc.PruneConfig(energy_e=1e-2))
    print(f"\nplanted rank {planted}, retained rank at e=1e-2: {k_mid}")


if __name__ == "__main__":
    main()
