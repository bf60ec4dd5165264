"""Constitutive models and plastic return mappings, with hand-written adjoints.

Everything is batched over particles: ``F`` has shape (N, 3, 3). Internally the
models produce the Kirchhoff stress ``tau = P F^T`` because that is what the
MLS-MPM transfer consumes; the public single-matrix operations return the first
Piola-Kirchhoff stress ``P``.

Plastic models are isotropic maps ``Fp = U diag(g(sigma)) V^T`` of the trial
gradient's singular values, so one generic vector-Jacobian product
(:func:`iso_vjp`) covers all of them.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import MaterialModel, MaterialParams, lame_from_E_nu, lame_jacobian

log = logging.getLogger(__name__)

SIGMA_MIN = 1e-4
_I3 = np.eye(3)
_ONES = np.ones(3)
_PDEV = _I3 - np.full((3, 3), 1.0 / 3.0)


class InversionError(ValueError):
    """Deformation gradient with det F <= 0 passed to a public stress op."""


class NumericError(RuntimeError):
    """SVD failure or non-finite values inside a constitutive update."""


@dataclass(frozen=True, eq=False)
class StressResult:
    stress: np.ndarray  # first Piola-Kirchhoff, Pa
    projected_F: np.ndarray

    @property
    def kirchhoff(self) -> np.ndarray:
        return self.stress @ self.projected_F.T

    @property
    def cauchy(self) -> np.ndarray:
        return self.kirchhoff / np.linalg.det(self.projected_F)


# ---------------------------------------------------------------- helpers

def _mm(a, b):
    return np.einsum("nij,njk->nik", a, b)


def _mmT(a, b):
    return np.einsum("nij,nkj->nik", a, b)


def _recompose(U, d, V):
    return np.einsum("nij,nj,nkj->nik", U, d, V)


def signed_svd(F):
    """SVD with det U = det V = +1; an inverted F shows up as a negative last singular value."""
    try:
        U, S, Vt = np.linalg.svd(F)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD failed: {exc}") from exc
    V = np.swapaxes(Vt, 1, 2).copy()
    S = S.copy()
    flipU = np.linalg.det(U) < 0
    flipV = np.linalg.det(V) < 0
    U[flipU, :, 2] *= -1.0
    S[flipU] *= np.array([1.0, 1.0, -1.0])
    V[flipV, :, 2] *= -1.0
    S[flipV] *= np.array([1.0, 1.0, -1.0])
    return U, S, V


def iso_vjp(U, S, V, g, Jg, Gbar):
    """Adjoint of ``G = U diag(g(S)) V^T`` wrt ``F = U diag(S) V^T``.

    ``Jg[n, i, k] = dg_i / dS_k``. Pairs with (nearly) equal singular values use
    the divided-difference limit ``Jg_ii - Jg_ij``.
    """
    M = np.einsum("nji,njk,nkl->nil", U, Gbar, V)  # U^T Gbar V
    Pb = np.zeros_like(M)
    Pb[:, [0, 1, 2], [0, 1, 2]] = np.einsum("ni,nik->nk", np.diagonal(M, axis1=1, axis2=2), Jg)
    for i, j in ((0, 1), (0, 2), (1, 2)):
        ds = S[:, i] - S[:, j]
        close = np.abs(ds) <= 1e-7 * np.maximum(np.abs(S[:, i]) + np.abs(S[:, j]), 1e-300)
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(close, Jg[:, i, i] - Jg[:, i, j], (g[:, i] - g[:, j]) / np.where(close, 1.0, ds))
        b = (g[:, i] + g[:, j]) / (S[:, i] + S[:, j])
        Pb[:, i, j] = 0.5 * ((a + b) * M[:, i, j] + (a - b) * M[:, j, i])
        Pb[:, j, i] = 0.5 * ((a - b) * M[:, i, j] + (a + b) * M[:, j, i])
    return np.einsum("nij,njk,nlk->nil", U, Pb, V)


def _diag_proj(U, Gbar, V):
    """diag(U^T Gbar V): the adjoint seen by the singular values."""
    return np.einsum("nji,njk,nki->ni", U, Gbar, V)


def _clamp_sigma(S, where: str):
    bad = S < SIGMA_MIN
    if np.any(bad):
        log.warning("%s: clamped %d singular values below %g", where, int(bad.sum()), SIGMA_MIN)
        S = np.maximum(S, SIGMA_MIN)
    return S


def _deviator(eps):
    m = eps.mean(axis=1, keepdims=True)
    dev = eps - m
    n = np.linalg.norm(dev, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        e = np.where(n[:, None] > 0, dev / np.where(n > 0, n, 1.0)[:, None], 0.0)
    return m[:, 0], dev, n, e


def _radial_jac(g, S, R, n, e):
    """Jacobian dg/dS of the radial return ``eps_new = mean(eps) + R e_hat``."""
    core = np.full((len(n), 3, 3), 1.0 / 3.0) + (R / n)[:, None, None] * (
        _PDEV[None] - np.einsum("ni,nj->nij", e, e))
    return g[:, :, None] * core / S[:, None, :]


# ------------------------------------------------------ derived parameters

def drucker_prager_alpha(theta_deg: float) -> float:
    s = math.sin(math.radians(theta_deg))
    return math.sqrt(2.0 / 3.0) * 2.0 * s / (3.0 - s)


def drucker_prager_alpha_grad(theta_deg: float) -> float:
    """d alpha / d theta with theta in degrees."""
    t = math.radians(theta_deg)
    s = math.sin(t)
    return math.sqrt(2.0 / 3.0) * 6.0 * math.cos(t) / (3.0 - s) ** 2 * math.pi / 180.0


def wave_modulus(material: MaterialParams) -> float:
    """P-wave style modulus used for the sound speed in the CFL bound."""
    m = material.model
    if m in (MaterialModel.ELASTIC, MaterialModel.PLASTICINE, MaterialModel.SAND):
        mu, lam = lame_from_E_nu(material.E, material.nu)
        return lam + 2.0 * mu
    if m is MaterialModel.NEWTONIAN:
        return material.kappa
    return material.kappa + 4.0 * material.mu_visc / 3.0


def stable_dt(material: MaterialParams, dx: float, density: float, cfl: float, v_allow: float) -> float:
    """Largest explicit substep satisfying the CFL (and, for fluids, viscous) limits."""
    c = math.sqrt(wave_modulus(material) / density)
    dt = cfl * dx / (v_allow + c)
    if material.model is MaterialModel.NEWTONIAN:
        dt = min(dt, cfl * density * dx * dx / (6.0 * material.mu_visc))
    return dt


# ------------------------------------------------------------ neo-Hookean

def _nh_tau(F, mu, lam):
    J = np.linalg.det(F)
    return mu * (_mmT(F, F) - _I3) + lam * np.log(J)[:, None, None] * _I3


def _nh_vjp(F, mu, lam, tau_bar):
    J = np.linalg.det(F)
    FinvT = np.swapaxes(np.linalg.inv(F), 1, 2)
    tr = np.trace(tau_bar, axis1=1, axis2=2)
    F_bar = mu * _mm(tau_bar + np.swapaxes(tau_bar, 1, 2), F) + lam * tr[:, None, None] * FinvT
    mu_bar = float(np.einsum("nij,nij->", tau_bar, _mmT(F, F) - _I3))
    lam_bar = float(np.sum(tr * np.log(J)))
    return F_bar, mu_bar, lam_bar


# -------------------------------------------------------- batched models
#
# Each model is a pair forward(params, F, C) -> (Fp, tau, cache) and
# backward(params, cache, Fp_bar, tau_bar) -> (F_bar, C_bar, grads) where
# ``grads`` maps physical parameter names to their adjoint summed over particles.

class _Model:
    def forward(self, p: MaterialParams, F, C):
        raise NotImplementedError

    def backward(self, p: MaterialParams, cache, Fp_bar, tau_bar):
        raise NotImplementedError


def _fix_inverted(F, where):
    """Replace inverted gradients by their singular-value clamped version."""
    J = np.linalg.det(F)
    bad = J <= 0
    if not np.any(bad):
        return F
    F = F.copy()
    U, S, V = signed_svd(F[bad])
    F[bad] = _recompose(U, _clamp_sigma(S, where), V)
    return F


class _Elastic(_Model):
    def forward(self, p, F, C):
        mu, lam = lame_from_E_nu(p.E, p.nu)
        F = _fix_inverted(F, "elastic")
        return F, _nh_tau(F, mu, lam), F

    def backward(self, p, cache, Fp_bar, tau_bar):
        mu, lam = lame_from_E_nu(p.E, p.nu)
        F_bar, mu_b, lam_b = _nh_vjp(cache, mu, lam, tau_bar)
        dE, dnu = np.array([mu_b, lam_b]) @ lame_jacobian(p.E, p.nu)
        return F_bar + Fp_bar, None, {"E": dE, "nu": dnu}


class _Newtonian(_Model):
    def forward(self, p, F, C):
        J = np.linalg.det(F)
        if np.any(J <= 0):
            log.warning("newtonian: clamped %d collapsed volume ratios", int((J <= 0).sum()))
            J = np.maximum(J, SIGMA_MIN ** 3)
        D = 0.5 * (C + np.swapaxes(C, 1, 2))
        D = D - np.trace(D, axis1=1, axis2=2)[:, None, None] / 3.0 * _I3
        Fp = np.cbrt(J)[:, None, None] * _I3
        tau = p.kappa * np.log(J)[:, None, None] * _I3 + 2.0 * p.mu_visc * J[:, None, None] * D
        return Fp, tau, (F, J, D)

    def backward(self, p, cache, Fp_bar, tau_bar):
        F, J, D = cache
        tr = np.trace(tau_bar, axis1=1, axis2=2)
        J_bar = (np.trace(Fp_bar, axis1=1, axis2=2) * np.cbrt(J) / (3.0 * J)
                 + p.kappa * tr / J
                 + 2.0 * p.mu_visc * np.einsum("nij,nij->n", tau_bar, D))
        F_bar = (J_bar * J)[:, None, None] * np.swapaxes(np.linalg.inv(F), 1, 2)
        sym = 0.5 * (tau_bar + np.swapaxes(tau_bar, 1, 2))
        C_bar = 2.0 * p.mu_visc * J[:, None, None] * (sym - tr[:, None, None] / 3.0 * _I3)
        grads = {"mu_visc": float(np.sum(2.0 * J * np.einsum("nij,nij->n", tau_bar, D))),
                 "kappa": float(np.sum(tr * np.log(J)))}
        return F_bar, C_bar, grads


def _hencky_stress(U, g, V, two_mu, lam_like, deviatoric: bool):
    """Kirchhoff stress of a Hencky model and the PK1 factors needed by its adjoint.

    ``t_i = two_mu * eps_i + lam_like * tr(eps)`` where ``eps`` is the deviator
    when ``deviatoric`` is set.
    """
    eps = np.log(g)
    tr = eps.sum(axis=1)
    base = eps - tr[:, None] / 3.0 if deviatoric else eps
    t = two_mu * base + lam_like * tr[:, None]
    tau = np.einsum("nij,nj,nkj->nik", U, t, U)
    return tau, (eps, base, tr, t)


def _hencky_vjp(U, g, V, Fp, two_mu, lam_like, deviatoric, parts, Fp_bar, tau_bar):
    """Adjoint of tau = P Fp^T with P = U diag(t/g) V^T; returns Fp_bar total and
    the singular-value adjoint ``dP`` used for parameter gradients."""
    eps, base, tr, t = parts
    p = t / g
    P = _recompose(U, p, V)
    P_bar = _mm(tau_bar, Fp)
    dt = np.full((len(g), 3, 3), lam_like) + two_mu * (_PDEV[None] if deviatoric else _I3[None])
    dt = dt / g[:, None, :]
    Jp = dt / g[:, :, None] - np.einsum("ni,ij->nij", t / g ** 2, _I3)
    Fp_tot = Fp_bar + _mmT(np.swapaxes(tau_bar, 1, 2), np.swapaxes(P, 1, 2)) + iso_vjp(U, g, V, p, Jp, P_bar)
    return Fp_tot, _diag_proj(U, P_bar, V)


def _radial_return(S, R):
    """Von Mises style projection of the Hencky deviator onto radius R."""
    eps = np.log(S)
    m, dev, n, e = _deviator(eps)
    plastic = n > R
    g = S.copy()
    if np.any(plastic):
        g[plastic] = np.exp(m[plastic, None] + R[plastic, None] * e[plastic])
    return g, plastic, n, e


class _Plasticine(_Model):
    def forward(self, p, F, C):
        mu, lam = lame_from_E_nu(p.E, p.nu)
        U, S, V = signed_svd(F)
        S = _clamp_sigma(S, "plasticine")
        R = np.full(len(S), p.tau_y / (2.0 * mu))
        g, plastic, n, e = _radial_return(S, R)
        Fp = F.copy()
        Fp[plastic] = _recompose(U[plastic], g[plastic], V[plastic])
        return Fp, _nh_tau(Fp, mu, lam), (U, S, V, g, plastic, n, e, R, Fp)

    def backward(self, p, cache, Fp_bar, tau_bar):
        U, S, V, g, plastic, n, e, R, Fp = cache
        mu, lam = lame_from_E_nu(p.E, p.nu)
        Fb, mu_b, lam_b = _nh_vjp(Fp, mu, lam, tau_bar)
        Fp_tot = Fp_bar + Fb
        F_bar = Fp_tot.copy()
        tau_y_b = 0.0
        if np.any(plastic):
            k = plastic
            Jg = _radial_jac(g[k], S[k], R[k], n[k], e[k])
            F_bar[k] = iso_vjp(U[k], S[k], V[k], g[k], Jg, Fp_tot[k])
            R_b = float(np.sum(_diag_proj(U[k], Fp_tot[k], V[k]) * g[k] * e[k]))
            tau_y_b = R_b / (2.0 * mu)
            mu_b += -R_b * R[0] / mu
        dE, dnu = np.array([mu_b, lam_b]) @ lame_jacobian(p.E, p.nu)
        return F_bar, None, {"E": dE, "nu": dnu, "tau_y": tau_y_b}


class _Sand(_Model):
    def _consts(self, p):
        mu, lam = lame_from_E_nu(p.E, p.nu)
        scale = (3.0 * lam + 2.0 * mu) / (2.0 * mu)
        return mu, lam, scale * drucker_prager_alpha(p.theta_fric), scale * drucker_prager_alpha_grad(p.theta_fric)

    def forward(self, p, F, C):
        mu, lam, c, _ = self._consts(p)
        U, S, V = signed_svd(F)
        S = _clamp_sigma(S, "sand")
        eps = np.log(S)
        tr = eps.sum(axis=1)
        _, dev, n, e = _deviator(eps)
        apex = tr >= 0
        dgamma = n + c * tr
        cone = ~apex & (dgamma > 0)
        g = S.copy()
        g[apex] = 1.0
        g[cone] = np.exp(tr[cone, None] * (1.0 / 3.0 - c * e[cone]))
        Fp = F.copy()
        k = apex | cone
        Fp[k] = _recompose(U[k], g[k], V[k])
        tau, parts = _hencky_stress(U, g, V, 2.0 * mu, lam, False)
        return Fp, tau, (U, S, V, g, apex, cone, tr, n, e, Fp, parts)

    def backward(self, p, cache, Fp_bar, tau_bar):
        U, S, V, g, apex, cone, tr, n, e, Fp, parts = cache
        mu, lam, c, dc = self._consts(p)
        Fp_tot, _ = _hencky_vjp(U, g, V, Fp, 2.0 * mu, lam, False, parts, Fp_bar, tau_bar)
        F_bar = Fp_tot.copy()
        theta_b = 0.0
        if np.any(apex):
            k = apex
            F_bar[k] = iso_vjp(U[k], S[k], V[k], g[k], np.zeros((int(k.sum()), 3, 3)), Fp_tot[k])
        if np.any(cone):
            k = cone
            gk, Sk, ek, trk, nk = g[k], S[k], e[k], tr[k], n[k]
            core = (np.full((len(nk), 3, 3), 1.0 / 3.0) - c * np.einsum("ni,j->nij", ek, _ONES)
                    - (c * trk / nk)[:, None, None] * (_PDEV[None] - np.einsum("ni,nj->nij", ek, ek)))
            Jg = gk[:, :, None] * core / Sk[:, None, :]
            F_bar[k] = iso_vjp(U[k], Sk, V[k], gk, Jg, Fp_tot[k])
            c_b = float(np.sum(_diag_proj(U[k], Fp_tot[k], V[k]) * gk * (-trk[:, None] * ek)))
            theta_b = c_b * dc
        return F_bar, None, {"theta_fric": theta_b}


class _NonNewtonian(_Model):
    """Elastic-viscoplastic Bingham fluid: Hencky elasticity with shear modulus
    ``mu_visc`` and bulk modulus ``kappa``; the deviatoric strain is returned to
    radius ``(tau_y + eta |D|) / (2 mu)`` where ``D = dev sym C`` is the rate."""

    def forward(self, p, F, C):
        mu = p.mu_visc
        U, S, V = signed_svd(F)
        S = _clamp_sigma(S, "nonnewtonian")
        D = 0.5 * (C + np.swapaxes(C, 1, 2))
        D = D - np.trace(D, axis1=1, axis2=2)[:, None, None] / 3.0 * _I3
        rate = np.sqrt(np.einsum("nij,nij->n", D, D))
        R = (p.tau_y + p.eta * rate) / (2.0 * mu)
        g, plastic, n, e = _radial_return(S, R)
        Fp = F.copy()
        Fp[plastic] = _recompose(U[plastic], g[plastic], V[plastic])
        tau, parts = _hencky_stress(U, g, V, 2.0 * mu, p.kappa, True)
        return Fp, tau, (U, S, V, g, plastic, n, e, R, D, rate, Fp, parts)

    def backward(self, p, cache, Fp_bar, tau_bar):
        U, S, V, g, plastic, n, e, R, D, rate, Fp, parts = cache
        mu = p.mu_visc
        Fp_tot, dP = _hencky_vjp(U, g, V, Fp, 2.0 * mu, p.kappa, True, parts, Fp_bar, tau_bar)
        eps, base, tr, t = parts
        grads = {"mu_visc": float(np.sum(dP * 2.0 * base / g)),
                 "kappa": float(np.sum(dP * tr[:, None] / g)),
                 "tau_y": 0.0, "eta": 0.0}
        F_bar = Fp_tot.copy()
        C_bar = np.zeros_like(D)
        if np.any(plastic):
            k = plastic
            Jg = _radial_jac(g[k], S[k], R[k], n[k], e[k])
            F_bar[k] = iso_vjp(U[k], S[k], V[k], g[k], Jg, Fp_tot[k])
            R_b = np.sum(_diag_proj(U[k], Fp_tot[k], V[k]) * g[k] * e[k], axis=1)
            grads["tau_y"] = float(np.sum(R_b)) / (2.0 * mu)
            grads["eta"] = float(np.sum(R_b * rate[k])) / (2.0 * mu)
            grads["mu_visc"] += float(np.sum(-R_b * R[k])) / mu
            live = rate[k] > 0
            if np.any(live):
                coef = np.zeros(len(R_b))
                coef[live] = R_b[live] * p.eta / (2.0 * mu) / rate[k][live]
                C_bar[k] = coef[:, None, None] * D[k]
        return F_bar, C_bar, grads


_MODELS = {
    MaterialModel.ELASTIC: _Elastic(),
    MaterialModel.NEWTONIAN: _Newtonian(),
    MaterialModel.NONNEWTONIAN: _NonNewtonian(),
    MaterialModel.PLASTICINE: _Plasticine(),
    MaterialModel.SAND: _Sand(),
}


def constitutive_forward(material: MaterialParams, F, C):
    """Batched return mapping + Kirchhoff stress: ``(Fp, tau, cache)``."""
    Fp, tau, cache = _MODELS[material.model].forward(material, np.asarray(F, float), np.asarray(C, float))
    if not (np.all(np.isfinite(tau)) and np.all(np.isfinite(Fp))):
        raise NumericError(f"non-finite stress in {material.model.value} model")
    return Fp, tau, cache


def constitutive_backward(material: MaterialParams, cache, Fp_bar, tau_bar):
    """Adjoint of :func:`constitutive_forward`: ``(F_bar, C_bar or None, grads)``."""
    return _MODELS[material.model].backward(material, cache, Fp_bar, tau_bar)


# --------------------------------------------------- yield diagnostics

def _hencky_invariants(F):
    U, S, V = signed_svd(np.asarray(F, float).reshape(-1, 3, 3))
    eps = np.log(np.maximum(S, SIGMA_MIN))
    _, _, n, _ = _deviator(eps)
    return n, eps.sum(axis=1)


def _rate_norm(C, count):
    if C is None:
        return np.zeros(count)
    C = np.asarray(C, float).reshape(-1, 3, 3)
    D = 0.5 * (C + np.swapaxes(C, 1, 2))
    D = D - np.trace(D, axis1=1, axis2=2)[:, None, None] / 3.0 * _I3
    return np.sqrt(np.einsum("nij,nij->n", D, D))


def yield_function(material: MaterialParams, F, C=None) -> np.ndarray:
    """Yield function in Hencky strain units; admissible states are <= 0.

    Models without a yield surface return zeros.
    """
    n, tr = _hencky_invariants(F)
    m = material.model
    if m is MaterialModel.PLASTICINE:
        mu, _ = lame_from_E_nu(material.E, material.nu)
        return n - material.tau_y / (2.0 * mu)
    if m is MaterialModel.NONNEWTONIAN:
        return n - (material.tau_y + material.eta * _rate_norm(C, len(n))) / (2.0 * material.mu_visc)
    if m is MaterialModel.SAND:
        mu, lam = lame_from_E_nu(material.E, material.nu)
        c = (3.0 * lam + 2.0 * mu) / (2.0 * mu) * drucker_prager_alpha(material.theta_fric)
        return n + c * tr
    return np.zeros(len(n))


STRAIN_FLOOR = 1e-10


def branch_id(material: MaterialParams, F, C=None) -> np.ndarray:
    """Return-mapping branch of each trial state: 0 elastic, 1 plastic (or cone), 2 apex.

    Sand states with strain below ``STRAIN_FLOOR`` get -1 (either branch gives zero stress).
    """
    n, tr = _hencky_invariants(F)
    m = material.model
    out = np.zeros(len(n), np.int8)
    if m in (MaterialModel.PLASTICINE, MaterialModel.NONNEWTONIAN):
        out[yield_function(material, F, C) > 0] = 1
    elif m is MaterialModel.SAND:
        apex = tr >= 0
        out[~apex & (yield_function(material, F, C) > 0)] = 1
        out[apex] = 2
        out[n + np.abs(tr) < STRAIN_FLOOR] = -1
    return out


def branch_margin(material: MaterialParams, F, C=None) -> np.ndarray:
    """Relative distance of each trial state to the nearest return-mapping branch switch.

    Infinite for models without branches. Used to keep finite-difference checks
    away from kinks.
    """
    n, tr = _hencky_invariants(F)
    m = material.model
    tiny = 1e-300
    if m in (MaterialModel.PLASTICINE, MaterialModel.NONNEWTONIAN):
        f = yield_function(material, F, C)
        R = n - f
        return np.abs(f) / np.maximum(R, tiny)
    if m is MaterialModel.SAND:
        f = yield_function(material, F, C)
        scale = np.maximum(n + np.abs(tr), tiny)
        margin = np.minimum(np.abs(f), np.abs(tr)) / scale
        # unstrained states give zero stress on either branch; round-off there is not a kink
        return np.where(n + np.abs(tr) < STRAIN_FLOOR, np.inf, margin)
    return np.full(len(n), np.inf)


# ------------------------------------------------- public single-matrix ops

def _single(F):
    F = np.asarray(F, dtype=float)
    if F.shape != (3, 3):
        raise ValueError("expected a 3x3 deformation gradient")
    if not np.linalg.det(F) > 0:
        raise InversionError(f"det F = {np.linalg.det(F):.3e} <= 0")
    return F[None]


def _result(Fp, tau):
    Fp = Fp[0]
    return StressResult(stress=tau[0] @ np.linalg.inv(Fp).T, projected_F=Fp)


def stress_elastic(F, mu_lame: float, lambda_lame: float) -> StressResult:
    """Neo-Hookean stress ``P = mu (F - F^-T) + lambda log J F^-T``."""
    F1 = _single(F)
    return _result(F1, _nh_tau(F1, mu_lame, lambda_lame))


def stress_newtonian(F_J, C_strain_rate, mu_visc: float, kappa: float) -> StressResult:
    """Weakly compressible fluid stress from the volume ratio and the velocity gradient.

    ``F_J`` may be the scalar volume ratio J or a deformation gradient whose
    determinant is used. The Cauchy pressure is ``-kappa log(J) / J``.
    """
    F_J = np.asarray(F_J, dtype=float)
    J = float(np.linalg.det(F_J)) if F_J.shape == (3, 3) else float(F_J)
    if not J > 0:
        raise InversionError(f"volume ratio J = {J} <= 0")
    p = MaterialParams(MaterialModel.NEWTONIAN, mu_visc=mu_visc, kappa=kappa)
    Fp, tau, _ = _MODELS[MaterialModel.NEWTONIAN].forward(
        p, (np.cbrt(J) * _I3)[None], np.asarray(C_strain_rate, float)[None])
    return _result(Fp, tau)


def return_map_von_mises(trial_F, mu_lame: float, lambda_lame: float, tau_Y: float) -> StressResult:
    F1 = _single(trial_F)
    U, S, V = signed_svd(F1)
    g, plastic, _, _ = _radial_return(S, np.array([tau_Y / (2.0 * mu_lame)]))
    Fp = _recompose(U, g, V) if plastic[0] else F1
    return _result(Fp, _nh_tau(Fp, mu_lame, lambda_lame))


def return_map_drucker_prager(trial_F, mu_lame: float, lambda_lame: float, theta_fric: float) -> StressResult:
    F1 = _single(trial_F)
    # route through the batched model with matching Lame constants
    E = mu_lame * (3.0 * lambda_lame + 2.0 * mu_lame) / (lambda_lame + mu_lame)
    nu = lambda_lame / (2.0 * (lambda_lame + mu_lame))
    p = MaterialParams(MaterialModel.SAND, E=E, nu=nu, theta_fric=theta_fric)
    Fp, tau, _ = _MODELS[MaterialModel.SAND].forward(p, F1, np.zeros((1, 3, 3)))
    return _result(Fp, tau)


def return_map_herschel_bulkley(trial_F, mu_visc: float, kappa: float, tau_Y: float, eta: float,
                                C: Optional[np.ndarray] = None) -> StressResult:
    """Viscoplastic return: no flow while the deviatoric Hencky strain stays within
    ``(tau_Y + eta |dev sym C|) / (2 mu)``, radial return otherwise.

    ``tau_Y`` may be zero and ``eta`` may be zero here, unlike in ``MaterialParams``.
    """
    F1 = _single(trial_F)
    C1 = np.zeros((1, 3, 3)) if C is None else np.asarray(C, float)[None]
    p = MaterialParams(MaterialModel.NONNEWTONIAN, mu_visc=mu_visc, kappa=kappa, tau_y=max(tau_Y, 0.0), eta=1.0)
    # eta is a plain multiplier, so bypass the positivity check for the eta = 0 limit
    object.__setattr__(p, "eta", float(eta))
    Fp, tau, _ = _MODELS[MaterialModel.NONNEWTONIAN].forward(p, F1, C1)
    return _result(Fp, tau)
