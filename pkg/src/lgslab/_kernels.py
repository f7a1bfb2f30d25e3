"""Compiled per-sample kernel for the reverse-step KL gap on mixture data.

For each forward sample x_t the kernel forms the exact reverse kernel
q(x_{t-1}|x_t) = sum_k r_k N(b_k, vv I) with mean mu* and covariance S*, draws
an antithetic pair x_{t-1} = b_kk +/- sqrt(vv) z from it, and records

  LR_*     0.5 * sum over the pair of log q - log p_family
  CV       third/fourth-order Hermite terms of log q - log N(mu*, S*) in
           whitened coordinates, minus their exact mean given (x_t, kk)
  KL_*     KL(N(mu*, S*) || N(mu*, S_family)) in closed form
  HALF_LOGDET, TRCOV, TRCOV2   posterior covariance summaries

Since every family shares the optimal mean, gap(family) = gap(full) +
E[KL_family], and the Hermite terms have known conditional mean, so
E[LR_FULL - CV] = gap(full) with most of the sampling noise removed.
"""
import functools
import math

import numba as nb
import numpy as np

LR_FULL, LR_DIAG, LR_TILDE, LR_BETA, CV, KL_DIAG, KL_TILDE, KL_BETA, HALF_LOGDET, TRCOV, TRCOV2 = range(11)
NCOL = 11
PRUNE = -40.0


def _build(D):
    @nb.njit(cache=True, fastmath=True, error_model="numpy")
    def step_terms(xt, z, u, means, logw, var, ab, om, ab_prev, om_prev, beta, out):
        n = xt.shape[0]
        d = D
        K = means.shape[0]
        tb = om_prev * beta / om
        c = math.sqrt(ab_prev) * beta / om
        gam = c * c / tb
        sab = math.sqrt(ab)
        v = ab * var + om
        shrink = om / v
        s2 = var * om / v
        vv = tb + c * c * s2
        sv = math.sqrt(vv)
        ck = c * shrink
        log2pi = math.log(2.0 * math.pi)

        ll = np.empty(K)
        r = np.empty(K)
        lr = np.empty(K)
        act = np.empty(K, np.int64)
        mb = np.empty(d)
        cov = np.empty((d, d))
        L = np.zeros((d, d))
        delta = np.empty((K, d))
        eps = np.empty((K, d))
        nk = np.empty(K)
        mk = np.empty(K)
        tk = np.empty(K)
        hk = np.empty(K)
        S = np.empty((d, d))
        S2 = np.empty((d, d))
        Sm = np.empty(d)
        zeta = np.empty(d)
        w = np.empty(d)
        xi = np.empty(d)
        rp = np.empty(K)
        sdiag = np.empty(d)

        for i in range(n):
            # data posterior responsibilities
            mx = -1e300
            for k in range(K):
                q = 0.0
                for j in range(d):
                    e = xt[i, j] - sab * means[k, j]
                    q += e * e
                ll[k] = logw[k] - 0.5 * q / v
                if ll[k] > mx:
                    mx = ll[k]
            na = 0
            tot = 0.0
            for k in range(K):
                if ll[k] - mx > PRUNE:
                    r[k] = math.exp(ll[k] - mx)
                    tot += r[k]
                    act[na] = k
                    na += 1
            ltot = math.log(tot)
            for a in range(na):
                k = act[a]
                r[k] /= tot
                lr[k] = ll[k] - mx - ltot
            for j in range(d):
                s = 0.0
                for a in range(na):
                    k = act[a]
                    s += r[k] * means[k, j]
                mb[j] = s

            # Cov(x0|x_t) and M = I + gamma Cov
            for a in range(na):
                k = act[a]
                for j in range(d):
                    delta[k, j] = means[k, j] - mb[j]
            for a1 in range(d):
                for b1 in range(a1 + 1):
                    s = 0.0
                    for a in range(na):
                        k = act[a]
                        s += r[k] * delta[k, a1] * delta[k, b1]
                    cov[a1, b1] = s
            trcov = 0.0
            trcov2 = 0.0
            for a1 in range(d):
                for b1 in range(a1 + 1):
                    cv_ = shrink * shrink * cov[a1, b1]
                    if a1 == b1:
                        cv_ += s2
                    cov[a1, b1] = cv_
                    cov[b1, a1] = cv_
            for a1 in range(d):
                trcov += cov[a1, a1]
                for b1 in range(d):
                    trcov2 += cov[a1, b1] * cov[a1, b1]
            # Cholesky of M, then L = sqrt(tb) L_M is the Cholesky factor of S*
            logdet_m = 0.0
            for a1 in range(d):
                for b1 in range(a1 + 1):
                    s = gam * cov[a1, b1]
                    if a1 == b1:
                        s += 1.0
                    for k in range(b1):
                        s -= L[a1, k] * L[b1, k]
                    if a1 == b1:
                        L[a1, a1] = math.sqrt(s)
                        logdet_m += math.log(s)
                    else:
                        L[a1, b1] = s / L[b1, b1]
            stb = math.sqrt(tb)
            for a1 in range(d):
                for b1 in range(a1 + 1):
                    L[a1, b1] *= stb
            ldet = d * math.log(tb) + logdet_m
            for j in range(d):
                sdiag[j] = tb + c * c * cov[j, j]

            # component offsets from mu*, raw (delta) and whitened (eps)
            for a in range(na):
                k = act[a]
                for j in range(d):
                    delta[k, j] *= ck
                nn = 0.0
                for a1 in range(d):
                    s = delta[k, a1]
                    for b1 in range(a1):
                        s -= L[a1, b1] * eps[k, b1]
                    eps[k, a1] = s / L[a1, a1]
                    nn += eps[k, a1] * eps[k, a1]
                nk[k] = nn
            for a1 in range(d):
                for b1 in range(a1 + 1):
                    s = 0.0
                    for a in range(na):
                        k = act[a]
                        s += r[k] * eps[k, a1] * eps[k, b1]
                    S[a1, b1] = s
                    S[b1, a1] = s
            trS = 0.0
            trS2 = 0.0
            trS3 = 0.0
            trS4 = 0.0
            for a1 in range(d):
                trS += S[a1, a1]
                for b1 in range(d):
                    s = 0.0
                    for k in range(d):
                        s += S[a1, k] * S[k, b1]
                    S2[a1, b1] = s
            for a1 in range(d):
                trS2 += S2[a1, a1]
                for b1 in range(d):
                    trS3 += S2[a1, b1] * S[b1, a1]
                    trS4 += S2[a1, b1] * S2[a1, b1]

            # reverse component for this sample
            cu = 0.0
            kk = act[na - 1]
            for a in range(na):
                cu += r[act[a]]
                if u[i] < cu:
                    kk = act[a]
                    break

            # exact mean of the Hermite terms given (x_t, kk): w ~ N(eps_kk, I - S)
            for a1 in range(d):
                s = 0.0
                for b1 in range(d):
                    s += S[a1, b1] * eps[kk, b1]
                Sm[a1] = s
            mSm = 0.0
            mS2m = 0.0
            mS3m = 0.0
            for a1 in range(d):
                mSm += eps[kk, a1] * Sm[a1]
                mS2m += Sm[a1] * Sm[a1]
                for b1 in range(d):
                    mS3m += Sm[a1] * S[a1, b1] * Sm[b1]
            e3 = 0.0
            e4 = 0.0
            for a in range(na):
                k = act[a]
                mu_ = 0.0
                sk = 0.0
                for a1 in range(d):
                    mu_ += eps[k, a1] * eps[kk, a1]
                    t_ = 0.0
                    for b1 in range(d):
                        t_ += S[a1, b1] * eps[k, b1]
                    sk += eps[k, a1] * t_
                tau = nk[k] - sk
                mk[k] = mu_
                tk[k] = tau
                mu2 = mu_ * mu_
                e3 += r[k] * mu_ * (mu2 + 3.0 * tau - 3.0 * nk[k])
                ep2 = mu2 + tau
                ep4 = mu2 * mu2 + 6.0 * mu2 * tau + 3.0 * tau * tau
                e4 += r[k] * (ep4 - 6.0 * nk[k] * ep2 + 3.0 * nk[k] * nk[k])
            e_wsw = trS - trS2 + mSm
            e_wsw2 = e_wsw * e_wsw + 2.0 * (trS2 - 2.0 * trS3 + trS4) + 4.0 * (mS2m - mS3m)
            e_sw2 = mS2m + trS2 - trS3
            cst = trS * trS + 2.0 * trS2
            e4 -= 3.0 * (e_wsw2 - 2.0 * trS * e_wsw - 4.0 * e_sw2 + cst)
            eg = e3 / 6.0 + e4 / 24.0

            # antithetic pair
            for a1 in range(d):
                s = sv * z[i, a1]
                for b1 in range(a1):
                    s -= L[a1, b1] * zeta[b1]
                zeta[a1] = s / L[a1, a1]
            for a in range(na):
                k = act[a]
                h = 0.0
                for j in range(d):
                    h += eps[k, j] * zeta[j]
                hk[k] = h

            acc_full = 0.0
            acc_diag = 0.0
            acc_tb = 0.0
            acc_b = 0.0
            acc_g = 0.0
            for sgn in (1.0, -1.0):
                xx = 0.0
                ww = 0.0
                xd = 0.0
                for j in range(d):
                    xi[j] = delta[kk, j] + sgn * sv * z[i, j]
                    w[j] = eps[kk, j] + sgn * zeta[j]
                    xx += xi[j] * xi[j]
                    ww += w[j] * w[j]
                    xd += xi[j] * xi[j] / sdiag[j]
                mq = -1e300
                for a in range(na):
                    k = act[a]
                    q = 0.0
                    for j in range(d):
                        e = xi[j] - delta[k, j]
                        q += e * e
                    ll[k] = lr[k] - 0.5 * q / vv
                    if ll[k] > mq:
                        mq = ll[k]
                sq = 0.0
                for a in range(na):
                    e = ll[act[a]] - mq
                    if e > PRUNE:
                        sq += math.exp(e)
                logq = mq + math.log(sq) - 0.5 * d * (log2pi + math.log(vv))
                acc_full += logq - (-0.5 * ww - 0.5 * ldet - 0.5 * d * log2pi)
                ldg = 0.0
                for j in range(d):
                    ldg += math.log(sdiag[j])
                acc_diag += logq - (-0.5 * xd - 0.5 * ldg - 0.5 * d * log2pi)
                acc_tb += logq - (-0.5 * xx / tb - 0.5 * d * (log2pi + math.log(tb)))
                acc_b += logq - (-0.5 * xx / beta - 0.5 * d * (log2pi + math.log(beta)))

                # Hermite terms at w
                g3 = 0.0
                g4a = 0.0
                wsw = 0.0
                for a in range(na):
                    k = act[a]
                    p = mk[k] + sgn * hk[k]
                    p2 = p * p
                    g3 += r[k] * p * (p2 - 3.0 * nk[k])
                    g4a += r[k] * (p2 * p2 - 6.0 * p2 * nk[k] + 3.0 * nk[k] * nk[k])
                    wsw += r[k] * p2
                    rp[k] = r[k] * p
                sw2 = 0.0
                for j in range(d):
                    s = 0.0
                    for a in range(na):
                        k = act[a]
                        s += rp[k] * eps[k, j]
                    sw2 += s * s
                g4 = g4a - 3.0 * (wsw * wsw - 2.0 * trS * wsw - 4.0 * sw2 + cst)
                acc_g += g3 / 6.0 + g4 / 24.0

            out[i, LR_FULL] = 0.5 * acc_full
            out[i, LR_DIAG] = 0.5 * acc_diag
            out[i, LR_TILDE] = 0.5 * acc_tb
            out[i, LR_BETA] = 0.5 * acc_b
            out[i, CV] = 0.5 * acc_g - eg
            kl_diag = 0.0
            for j in range(d):
                kl_diag += math.log1p(gam * cov[j, j])
            out[i, KL_DIAG] = 0.5 * (kl_diag - logdet_m)
            out[i, KL_TILDE] = 0.5 * (gam * trcov - logdet_m)
            out[i, KL_BETA] = 0.5 * ((d * tb + c * c * trcov) / beta - d + d * math.log(beta) - ldet)
            out[i, HALF_LOGDET] = 0.5 * logdet_m
            out[i, TRCOV] = trcov
            out[i, TRCOV2] = trcov2

    return step_terms


@functools.lru_cache(maxsize=None)
def step_kernel(d):
    """Kernel compiled for a fixed dimension so the short inner loops unroll."""
    return _build(int(d))


def step_terms(xt, z, u, means, logw, var, ab, om, ab_prev, om_prev, beta, out):
    step_kernel(xt.shape[1])(xt, z, u, means, logw, var, ab, om, ab_prev, om_prev, beta, out)
