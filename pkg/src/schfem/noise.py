"""Regularized space-time white noise on a coarse hat-function basis.

The driving noise is a mean-zero combination of scaled P1 hat functions on
the noise mesh, each driven by an independent Brownian motion.  Increments
are generated from a counter-based stream (Philox) keyed by (master seed,
realization index, step index) and mapped through the Cephes inverse normal
CDF (scipy.special.ndtri), so a sampled trajectory is bit-identical no
matter in which order, process or schedule it is drawn.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from . import fem
from .errors import InputError, StructuralError

SPACE_DIM = 2  # formulas carry (d+1)^-1 symbolically; the simulator is 2D


@dataclass(frozen=True)
class NoiseModel:
    """Scaled hat basis with mean shifts on the noise mesh.

    For basis function phi_l the scaling weight is
    ``s_l = 1 / sqrt((d+1)^-1 |(phi_l, 1)|)`` and the mean shift is
    ``m(phi_l) = (phi_l, 1)/|D|``; sampled increments are
    ``sigma * sum_l s_l (phi_l - m(phi_l)) dbeta_l`` which have exact zero
    mean by construction.
    """

    mesh: object
    sigma: float
    hat_integrals: np.ndarray  # (phi_l, 1) per basis function
    means: np.ndarray  # m(phi_l)
    weights: np.ndarray  # s_l

    @property
    def dim(self):
        """Number of basis functions L (one hat per vertex)."""
        return self.mesh.num_vertices


def build_noise_model(noise_mesh, sigma):
    if sigma < 0:
        raise InputError("noise amplitude must be nonnegative")
    hat = fem.lumped_mass_diagonal(noise_mesh)
    if np.any(hat <= 0):
        raise StructuralError("degenerate noise mesh: nonpositive hat integral")
    means = hat / noise_mesh.area
    weights = 1.0 / np.sqrt(np.abs(hat) / (SPACE_DIM + 1))
    return NoiseModel(noise_mesh, float(sigma), hat, means, weights)


def _philox_key(master_seed, realization, step):
    seed = np.uint64(master_seed & 0xFFFFFFFFFFFFFFFF)
    mix = np.uint64(((realization & 0xFFFFFFFF) << 32) | (step & 0xFFFFFFFF))
    return np.array([seed, mix], dtype=np.uint64)


def standard_normals(master_seed, realization, step, count):
    """Deterministic N(0,1) draws for one (realization, step) pair.

    Uniforms come from a Philox counter stream as 53-bit integers mapped to
    (0, 1); the normal transform is the fixed inverse-CDF rational
    approximation, so there is no rejection and no order dependence.
    """
    gen = np.random.Generator(
        np.random.Philox(key=_philox_key(master_seed, realization, step))
    )
    ints = gen.integers(1, 1 << 53, size=count, dtype=np.int64)
    return ndtri(ints / float(1 << 53))


def increment_values(model, master_seed, realization, step, tau_n):
    """Nodal coefficients of sigma * Delta_n W-tilde on the noise mesh."""
    if tau_n <= 0:
        raise InputError("step duration must be positive")
    z = standard_normals(master_seed, realization, step, model.dim)
    dbeta = np.sqrt(tau_n) * z
    scaled = model.weights * dbeta
    shift = float(model.weights * model.means @ dbeta)
    return model.sigma * (scaled - shift), dbeta


@dataclass
class NoisePath:
    """One realization's increment stream and accumulated noise path."""

    model: NoiseModel
    master_seed: int
    realization: int
    steps_done: int = 0
    times: list = field(default_factory=lambda: [0.0])
    sigma_sum: np.ndarray = None  # Sigma^n coefficients on the noise mesh
    _sigma_levels: list = field(default_factory=list)

    def __post_init__(self):
        if self.sigma_sum is None:
            self.sigma_sum = np.zeros(self.model.dim)
        if not self._sigma_levels:
            self._sigma_levels = [self.sigma_sum.copy()]

    def sample_increment(self, step, tau_n):
        """Draw the step's increment and extend the running sum.

        ``step`` must be ``steps_done + 1``; re-running a trajectory always
        reproduces the same stream because draws are keyed, not stateful.
        """
        if step != self.steps_done + 1:
            raise InputError(
                f"steps must be sampled in order (expected {self.steps_done + 1})"
            )
        coeffs, _ = increment_values(
            self.model, self.master_seed, self.realization, step, tau_n
        )
        self.sigma_sum = self.sigma_sum + coeffs
        self.steps_done = step
        self.times.append(self.times[-1] + tau_n)
        self._sigma_levels.append(self.sigma_sum.copy())
        return fem.fe_function(self.model.mesh, coeffs)

    def sigma_at_level(self, n):
        """Sigma^n coefficients (exact running sum) on the noise mesh."""
        if n < 0 or n > self.steps_done:
            raise InputError("level outside sampled range")
        return fem.fe_function(self.model.mesh, self._sigma_levels[n].copy())

    def sigma_interpolant(self, t):
        """Piecewise linear interpolant Sigma_{h,tau}(t) of the running sums."""
        times = np.asarray(self.times)
        if t < times[0] - 1e-14 or t > times[-1] + 1e-14:
            raise InputError("time outside the sampled path")
        n = int(np.searchsorted(times, t, side="left"))
        if n == 0:
            return self.sigma_at_level(0)
        theta = (t - times[n - 1]) / (times[n] - times[n - 1])
        vals = (1.0 - theta) * self._sigma_levels[n - 1] + theta * self._sigma_levels[n]
        return fem.fe_function(self.model.mesh, vals)

    def state_payload(self):
        return {
            "master_seed": self.master_seed,
            "realization": self.realization,
            "steps_done": self.steps_done,
            "times": list(self.times),
            "sigma_levels": [lv.copy() for lv in self._sigma_levels],
        }

    @classmethod
    def from_payload(cls, model, payload):
        path = cls(model, payload["master_seed"], payload["realization"])
        path.steps_done = payload["steps_done"]
        path.times = list(payload["times"])
        path._sigma_levels = [lv.copy() for lv in payload["sigma_levels"]]
        path.sigma_sum = path._sigma_levels[-1].copy()
        return path


def noise_indicator(model, tau_n):
    """tau_n^2 * sum_l ||grad phi_l||^2 / ((d+1)^-1 |(phi_l, 1)|).

    Defined for unit amplitude: sigma never enters the indicator and is
    reported separately so users can rescale.
    """
    if tau_n < 0:
        raise InputError("step duration must be nonnegative")
    K = fem.assemble_stiffness(model.mesh).matrix
    grad_sq = K.diagonal()
    denom = np.abs(model.hat_integrals) / (SPACE_DIM + 1)
    return float(tau_n * tau_n * np.sum(grad_sq / denom))


def dump_increments(fh, model, master_seed, realization, taus):
    """Replay dump: header (seed, L, N) then tau list then per-step dbeta.

    All payload numbers are little-endian float64; the header carries the
    seed, the basis size L and the step count N as little-endian int64.
    """
    taus = list(taus)
    fh.write(struct.pack("<qqq", master_seed, model.dim, len(taus)))
    fh.write(np.asarray(taus, dtype="<f8").tobytes())
    for step, tau_n in enumerate(taus, start=1):
        _, dbeta = increment_values(model, master_seed, realization, step, tau_n)
        fh.write(np.asarray(dbeta, dtype="<f8").tobytes())


def load_increments(fh):
    seed, dim, n = struct.unpack("<qqq", fh.read(24))
    taus = np.frombuffer(fh.read(8 * n), dtype="<f8")
    data = np.frombuffer(fh.read(8 * n * dim), dtype="<f8").reshape(n, dim)
    return {"master_seed": seed, "L": dim, "taus": taus, "dbeta": data}


def check_compatibility(model, solver_mesh):
    """Enforce the noise compatibility condition V_htilde subset V_h^n."""
    if not solver_mesh.refines(model.mesh):
        raise StructuralError(
            "solver mesh does not refine the noise mesh (compatibility violated)"
        )
