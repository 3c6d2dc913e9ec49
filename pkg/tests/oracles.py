"""Plain-numpy reference implementations used as test oracles.

Everything here is written from the definitions with loops and explicit
formulas, sharing no code with the package.
"""

import numpy as np


def relu(x):
    return np.maximum(x, 0.0)


def log_softmax(z):
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def mlp_forward(params, obs, torso_layers, head=0):
    """Torso + one head; returns (logits, values) with leading shape of obs."""
    lead = obs.shape[:-1]
    x = obs.reshape(-1, obs.shape[-1])
    for i in range(torso_layers):
        x = relu(x @ params[f"torso/w{i}"] + params[f"torso/b{i}"])
    def head_out(part):
        h = relu(x @ params[f"head{head}/{part}/w0"] + params[f"head{head}/{part}/b0"])
        return h @ params[f"head{head}/{part}/w1"] + params[f"head{head}/{part}/b1"]
    logits = head_out("pi")
    values = head_out("v")[:, 0]
    return logits.reshape(lead + (-1,)), values.reshape(lead)


def vtrace_loop(logp_target, logp_behavior, rewards, values, dones, gamma, lam, alpha_rho, alpha_c, rho_bar=1.0, c_bar=1.0):
    """Leaky V-trace by an explicit backward loop; returns (targets, rhos)."""
    n = rewards.shape[0]
    ratio = np.exp(np.maximum(logp_target, np.log(1e-30)) - logp_behavior)
    rho = alpha_rho * np.minimum(rho_bar, ratio) + (1 - alpha_rho) * ratio
    c = lam * (alpha_c * np.minimum(c_bar, ratio) + (1 - alpha_c) * ratio)
    targets = np.zeros_like(values[:-1])
    acc = np.zeros_like(values[0])
    for t in reversed(range(n)):
        disc = gamma * (1.0 - dones[t])
        delta = rho[t] * (rewards[t] + disc * values[t + 1] - values[t])
        acc = delta + disc * c[t] * acc
        targets[t] = values[t] + acc
    return targets, rho


def frozen_ac_loss(logits, values, ref_logits, ref_values, traj, hyper, old_logits=None, g_kl=0.0):
    """Actor-critic loss whose stop-gradient pieces come from a reference point.

    ``logits``/``values`` vary; everything under a stop-gradient is computed
    from ``ref_logits``/``ref_values``. Sums over steps 0..n-2.
    """
    n = traj.length
    k = n - 1
    a = traj.actions
    lp = log_softmax(logits[:n])
    lp_ref = log_softmax(ref_logits[:n])
    take = lambda l: np.take_along_axis(l, a[..., None], -1)[..., 0]
    targets, rho = vtrace_loop(
        take(lp_ref), traj.behavior_logp, traj.rewards, ref_values, traj.dones,
        hyper["gamma"], hyper["lam"], hyper["alpha_rho"], hyper["alpha_c"],
    )
    disc = hyper["gamma"] * (1.0 - traj.dones)
    v_loss = hyper["g_v"] * np.sum((targets[:k] - values[:k]) ** 2)
    # with every stop-gradient frozen the inner and outer advantages coincide
    adv = traj.rewards[:k] + disc[:k] * targets[1:k + 1] - ref_values[:k]
    p_loss = -hyper["g_p"] * np.sum(rho[:k] * take(lp)[:k] * adv)
    pi = np.exp(lp)
    e_loss = hyper["g_e"] * np.sum((pi * lp).sum(-1)[:k])
    total = v_loss + p_loss + e_loss
    if g_kl:
        lo = log_softmax(old_logits[:n])
        total += g_kl * np.sum((pi * (lp - lo)).sum(-1)[:k])
    return total


def central_diff(f, x, h=1e-6):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        a = x.copy(); a[i] += h
        b = x.copy(); b[i] -= h
        g[i] = (f(a) - f(b)) / (2 * h)
    return g


def vtrace_sum_form(ratio, rewards, values, gamma, lam=1.0, rho_bar=1.0, c_bar=1.0):
    """Plain V-trace as an explicit sum of truncated products (no episode ends).

    v_s = V(x_s) + sum_{t>=s} gamma^{t-s} (prod_{i=s}^{t-1} c_i) rho_t delta_t V
    """
    n = rewards.shape[0]
    rho = np.minimum(rho_bar, ratio)
    c = lam * np.minimum(c_bar, ratio)
    out = np.zeros_like(values[:-1])
    for s in range(n):
        total = values[s].copy()
        for t in range(s, n):
            prod = np.prod(c[s:t], axis=0) if t > s else 1.0
            delta = rho[t] * (rewards[t] + gamma * values[t + 1] - values[t])
            total = total + gamma ** (t - s) * prod * delta
        out[s] = total
    return out


def n_step_return(rewards, values, gamma):
    """sum_{j>=s} gamma^{j-s} r_j + gamma^{n-s} V(x_n) for every start s."""
    n = rewards.shape[0]
    out = np.zeros_like(values[:-1])
    for s in range(n):
        out[s] = sum(gamma ** (j - s) * rewards[j] for j in range(s, n)) + gamma ** (n - s) * values[n]
    return out
