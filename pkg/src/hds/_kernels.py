"""Compiled white-box right-hand side and its vector-Jacobian product.

Coefficient rows (all per sample, shape (N_COEF, N)):

    0 r        1 r/K      2 t_lag    3 r_c
    4 a_CFP*r_c  5 a_YFP*r_c  6 a_R*r_c  7 a_S*r_c  8 a_480*r_c  9 a_530*r_c
    10 d_RFP  11 d_CFP  12 d_YFP  13 d_R  14 d_S
    15 eps76  16 eps81
    17 K_GR76*B_R  18 K_GS76*B_S  19 K_GR81*B_R  20 K_GS81*B_S
"""

import math

import numpy as np
from numba import njit

N_COEF = 21


@njit(cache=True)
def _lag(t, t_lag):
    return 1.0 / (1.0 + math.exp(-4.0 * (t - t_lag)))


@njit(cache=True)
def whitebox_forward(x, p, t):
    n = x.shape[1]
    out = np.empty_like(x)
    for i in range(n):
        c, rfp, cfp, yfp, R, S, f480, f530 = x[0, i], x[1, i], x[2, i], x[3, i], x[4, i], x[5, i], x[6, i], x[7, i]
        lag = _lag(t, p[2, i])
        gamma = (p[0, i] - p[1, i] * c) * lag
        R2 = R * R
        S2 = S * S
        a76 = p[17, i] * R2 + p[18, i] * S2
        a81 = p[19, i] * R2 + p[20, i] * S2
        f76 = (p[15, i] + a76) / (1.0 + a76)
        f81 = (p[16, i] + a81) / (1.0 + a81)
        out[0, i] = gamma * c
        out[1, i] = p[3, i] - (p[10, i] + gamma) * rfp
        out[2, i] = p[4, i] * f76 - (p[11, i] + gamma) * cfp
        out[3, i] = p[5, i] * f81 - (p[12, i] + gamma) * yfp
        out[4, i] = p[6, i] - (p[13, i] + gamma) * R
        out[5, i] = p[7, i] - (p[14, i] + gamma) * S
        out[6, i] = p[8, i] - gamma * f480
        out[7, i] = p[9, i] - gamma * f530
    return out


@njit(cache=True)
def whitebox_vjp(x, p, t, g):
    n = x.shape[1]
    gx = np.empty_like(x)
    gp = np.empty_like(p)
    for i in range(n):
        c, rfp, cfp, yfp, R, S, f480, f530 = x[0, i], x[1, i], x[2, i], x[3, i], x[4, i], x[5, i], x[6, i], x[7, i]
        g0, g1, g2, g3, g4, g5, g6, g7 = g[0, i], g[1, i], g[2, i], g[3, i], g[4, i], g[5, i], g[6, i], g[7, i]
        lag = _lag(t, p[2, i])
        logistic = p[0, i] - p[1, i] * c
        gamma = logistic * lag
        R2 = R * R
        S2 = S * S
        a76 = p[17, i] * R2 + p[18, i] * S2
        a81 = p[19, i] * R2 + p[20, i] * S2
        inv76 = 1.0 / (1.0 + a76)
        inv81 = 1.0 / (1.0 + a81)
        f76 = (p[15, i] + a76) * inv76
        f81 = (p[16, i] + a81) * inv81

        g_gamma = g0 * c - g1 * rfp - g2 * cfp - g3 * yfp - g4 * R - g5 * S - g6 * f480 - g7 * f530
        g_f76 = g2 * p[4, i]
        g_f81 = g3 * p[5, i]
        g_a76 = g_f76 * (1.0 - p[15, i]) * inv76 * inv76
        g_a81 = g_f81 * (1.0 - p[16, i]) * inv81 * inv81

        gx[0, i] = g0 * gamma - g_gamma * p[1, i] * lag
        gx[1, i] = -g1 * (p[10, i] + gamma)
        gx[2, i] = -g2 * (p[11, i] + gamma)
        gx[3, i] = -g3 * (p[12, i] + gamma)
        gx[4, i] = -g4 * (p[13, i] + gamma) + 2.0 * R * (g_a76 * p[17, i] + g_a81 * p[19, i])
        gx[5, i] = -g5 * (p[14, i] + gamma) + 2.0 * S * (g_a76 * p[18, i] + g_a81 * p[20, i])
        gx[6, i] = -g6 * gamma
        gx[7, i] = -g7 * gamma

        gp[0, i] = g_gamma * lag
        gp[1, i] = -g_gamma * c * lag
        gp[2, i] = -g_gamma * logistic * 4.0 * lag * (1.0 - lag)
        gp[3, i] = g1
        gp[4, i] = g2 * f76
        gp[5, i] = g3 * f81
        gp[6, i] = g4
        gp[7, i] = g5
        gp[8, i] = g6
        gp[9, i] = g7
        gp[10, i] = -g1 * rfp
        gp[11, i] = -g2 * cfp
        gp[12, i] = -g3 * yfp
        gp[13, i] = -g4 * R
        gp[14, i] = -g5 * S
        gp[15, i] = g_f76 * inv76
        gp[16, i] = g_f81 * inv81
        gp[17, i] = g_a76 * R2
        gp[18, i] = g_a76 * S2
        gp[19, i] = g_a81 * R2
        gp[20, i] = g_a81 * S2
    return gx, gp
