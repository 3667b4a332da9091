"""Safe Q-iteration agent: shared encoder, three value heads, distilled policy, risk shield.

Parameter sets live in three stores. ``online`` holds everything that trains
(``enc.``, ``q.``, ``qd.``, ``qt.``, ``pi.``, ``pcv.``); ``target`` holds frozen
copies of the encoder and the three value heads; ``baseline`` holds a frozen
encoder and policy head and plays the role of the reference policy. Before the
first baseline refresh the reference policy is uniform.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .. import nn
from ..encoder import Encoder, EncoderConfig, EncoderStream
from ..errors import DimensionError, NumericError
from ..nn import functional as F
from ..nn.params import ParamStore, load_arrays, save_arrays
from ..nn.tensor import Tensor, softplus
from ..safety import EnsembleConfig, PredictionLog, SafetyEnsemble, window_labels
from .config import TrainConfig
from .core import compute_targets, distill_loss, epsilon_tilde, q_l_value, safe_policy_lp_batch, td_loss
from .replay import PrioritizedReplay

VALUE_HEADS = ("q", "qd", "qt")


@dataclass
class EpisodeContext:
    online: EncoderStream
    baseline: EncoderStream | None
    eps_tilde: float | None = None
    lp_eps: float | None = None
    step: int = 0
    encodings: list = field(default_factory=list)


class SafeAgent:
    def __init__(self, enc_cfg: EncoderConfig, ens_cfg: EnsembleConfig, cfg: TrainConfig, seed: int = 0):
        self.enc_cfg, self.ens_cfg, self.cfg, self.seed = enc_cfg, ens_cfg, cfg, seed
        nA = enc_cfg.n_actions
        d = enc_cfg.d_model
        self.n_actions = nA
        self.encoder = Encoder(enc_cfg, "enc")
        self.heads = {name: nn.MLP(name, [d, *cfg.head_hidden, nA]) for name in VALUE_HEADS}
        self.policy = nn.MLP("pi", [d, *cfg.policy_hidden, nA])
        self.ensemble = SafetyEnsemble(ens_cfg, d, nA, "pcv")
        self.online = ParamStore()
        rng = nn.RngStream(seed, "sdqn/init")
        self.encoder.init(self.online, rng)
        for head in self.heads.values():
            head.init(self.online, rng)
        self.policy.init(self.online, rng)
        self.ensemble.init(self.online, rng)
        self.target = self._copy(("enc.", "q.", "qd.", "qt."))
        self.baseline = self._copy(("enc.", "pi."))
        self.baseline_uniform = True
        self.opt = nn.AdamState(lr=cfg.lr, lr_overrides={"q.": cfg.lr_beta, "qd.": cfg.lr_alpha, "qt.": cfg.lr_alpha})
        self.pcv_opt = nn.AdamState(lr=cfg.lr_pcv)
        self.iteration = 0
        self.prediction_log = PredictionLog() if cfg.log_predictions else None
        self.mc_rng = nn.RngStream(seed, "sdqn/act-mc")  # used when no stream is passed to act

    # parameter sets -------------------------------------------------------------------------------
    def _copy(self, prefixes) -> ParamStore:
        out = ParamStore()
        for name, t in self.online.items():
            if name.startswith(prefixes):
                out.add(name, t.data)
        return out

    def sync_targets(self) -> None:
        self.target.load_arrays(self.online.to_arrays())

    def refresh_baseline(self) -> None:
        self.baseline.load_arrays(self.online.to_arrays())
        self.baseline_uniform = False

    @property
    def warm(self) -> bool:
        """True while the projection runs unconstrained (before the first usable baseline)."""
        return self.iteration < self.cfg.warmup

    # heads ----------------------------------------------------------------------------------------
    def values(self, store: ParamStore, g) -> tuple[Tensor, Tensor, Tensor]:
        q = self.heads["q"](store, g)
        qd = self.heads["qd"](store, g)
        qt = softplus(self.heads["qt"](store, g)) * self.cfg.qt_scale
        return q, qd, qt

    def values_np(self, store: ParamStore, g) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        with nn.no_grad():
            return tuple(v.data for v in self.values(store, Tensor(np.asarray(g, dtype=np.float64))))

    def baseline_rows(self, g_b, n: int) -> np.ndarray:
        if self.baseline_uniform:
            return np.full((n, self.n_actions), 1.0 / self.n_actions)
        with nn.no_grad():
            return F.softmax(self.policy(self.baseline, Tensor(np.asarray(g_b, dtype=np.float64)))).data

    def policy_rows(self, g) -> np.ndarray:
        with nn.no_grad():
            return F.softmax(self.policy(self.online, Tensor(np.asarray(g, dtype=np.float64)))).data

    def slack(self, pi_start, qd_start, qt_start) -> np.ndarray:
        return epsilon_tilde(pi_start, qd_start, qt_start, self.cfg.d0)

    def project(self, q, qd, qt, pi_b, eps) -> np.ndarray:
        """Projected policy rows; unconstrained during warmup."""
        eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), (len(q),))
        if self.warm:
            eps = np.full(len(q), np.inf)
        ql = np.where(np.isinf(eps)[:, None], qd, q_l_value(qd, qt, np.where(np.isinf(eps), 0.0, eps)))
        return safe_policy_lp_batch(q, ql, pi_b, eps)

    # acting ---------------------------------------------------------------------------------------
    def begin_episode(self) -> EpisodeContext:
        base = None
        if not self.baseline_uniform and not self.cfg.stale_encodings:
            base = EncoderStream(self.encoder, self.baseline)
        return EpisodeContext(EncoderStream(self.encoder, self.online), base)

    def encode_step(self, ctx: EpisodeContext, obs, aux) -> tuple[np.ndarray, np.ndarray]:
        g = ctx.online.push(obs, aux)
        gb = ctx.baseline.push(obs, aux) if ctx.baseline is not None else g
        if self.cfg.stale_encodings:
            ctx.encodings.append(g)
        return g, gb

    def act(self, ctx: EpisodeContext, obs, aux, explore: float = 0.0, sample: bool = False,
            rng=None, mc_rng=None, episode: int = 0) -> int:
        """Projected-policy proposal passed through the shield; with probability ``explore`` a random action instead.

        Exploration wraps the shielded choice rather than feeding it, otherwise a miscalibrated
        ensemble vetoes exactly the actions whose outcomes would correct it.
        """
        g, gb = self.encode_step(ctx, obs, aux)
        q, qd, qt = (v[0] for v in self.values_np(self.online, g[None]))
        pb = self.baseline_rows(gb[None], 1)[0]
        if ctx.step == 0:
            ctx.eps_tilde = float(self.slack(pb, qd, qt))
        pi = self.project(q[None], qd[None], qt[None], pb[None], ctx.eps_tilde)[0]
        greedy = int(np.argmax(pi))
        gen = getattr(rng, "generator", rng)
        if gen is not None and explore > 0 and gen.random() < explore:
            ctx.step += 1
            return int(gen.integers(self.n_actions))
        if sample and gen is not None:
            proposal = int(gen.choice(self.n_actions, p=pi / pi.sum()))
        else:
            proposal = greedy
        action = proposal
        if self.cfg.shield:
            h = self.ens_cfg.horizon
            seqs = np.array([[a] + [greedy] * (h - 1) for a in range(self.n_actions)])
            est = self.ensemble.predict(self.online, np.repeat(g[None], self.n_actions, 0), seqs,
                                        mc_rng if mc_rng is not None else self.mc_rng)
            J = self.ens_cfg.lambda_e * est.mean + self.ens_cfg.lambda_v * est.std
            if J[proposal] > J.min() + self.cfg.shield_tolerance:
                action = int(np.argmin(J))
            if self.prediction_log is not None:
                self.prediction_log.record(episode, ctx.step, seqs, est, action)
        ctx.step += 1
        return action

    # training -------------------------------------------------------------------------------------
    def _batch_inputs(self, episodes, lengths):
        cfg = self.enc_cfg
        U, L = len(episodes), max(lengths)
        obs = np.zeros((U, L) + cfg.obs_shape)
        aux = np.zeros((U, L, cfg.aux_dim))
        for u, (ep, n) in enumerate(zip(episodes, lengths)):
            obs[u, :n] = np.asarray(ep.observations[:n])
            aux[u, :n] = ep.aux_inputs(self.n_actions, cfg.cost_scale)[:n]
        return obs, aux

    def _stale_inputs(self, episodes, lengths) -> np.ndarray:
        U, L = len(episodes), max(lengths)
        out = np.zeros((U, L, self.enc_cfg.d_model))
        for u, (ep, n) in enumerate(zip(episodes, lengths)):
            if ep.encodings is None:
                raise DimensionError("stale-encoding mode needs episodes recorded with encodings")
            out[u, :n] = ep.encodings[:n]
        return out

    def train_step(self, buffer: PrioritizedReplay, beta: float, rng, pcv_rng=None) -> dict:
        cfg = self.cfg
        idx, w = buffer.sample(cfg.batch_size, rng, beta)
        eids = buffer.episode_ids(idx)
        ts = buffer.t[idx]
        uniq, inv = np.unique(eids, return_inverse=True)
        episodes = [buffer.episodes[int(e)] for e in uniq]
        lengths = [int(ts[inv == u].max()) + 2 for u in range(len(uniq))]
        acts = np.array([episodes[u].actions[t] for u, t in zip(inv, ts)])
        cost = np.array([episodes[u].costs[t] for u, t in zip(inv, ts)]) * cfg.cost_scale
        con = np.array([episodes[u].constraints[t] for u, t in zip(inv, ts)])
        next_term = np.array([episodes[u].terminal and t == len(episodes[u]) - 1 for u, t in zip(inv, ts)], float)

        self.online.zero_grad()
        if cfg.stale_encodings:
            data = self._stale_inputs(episodes, lengths)
            H, Ht, Hb = Tensor(data), data, data
        else:
            obs, aux = self._batch_inputs(episodes, lengths)
            H = self.encoder.forward(self.online, obs, aux)
            with nn.no_grad():
                Ht = self.encoder.forward(self.target, obs, aux).data
                Hb = None if self.baseline_uniform else self.encoder.forward(self.baseline, obs, aux).data
        B, U = len(idx), len(uniq)
        nxt = (inv, ts + 1)

        # targets from frozen parameters
        tq, tqd, tqt = self.values_np(self.target, Ht[nxt])
        _, tqd0, tqt0 = self.values_np(self.target, Ht[:, 0])
        pk_next = self.baseline_rows(None if Hb is None else Hb[nxt], B)
        pk0 = self.baseline_rows(None if Hb is None else Hb[:, 0], U)
        eps_t = np.asarray(self.slack(pk0, tqd0, tqt0))[inv]
        pi_next = self.project(tq, tqd, tqt, pk_next, eps_t)
        y_d, y_t, y = compute_targets(cost, con, next_term, 1.0, tq, tqd, tqt, pk_next, pi_next, cfg.gamma)

        # online regression
        g = H[(inv, ts)]
        q, qd, qt = self.values(self.online, g)
        rows = np.arange(B)
        loss_q, td_q = td_loss(q[(rows, acts)], y, w)
        loss_d, td_d = td_loss(qd[(rows, acts)], y_d, w)
        # stopping times are regressed in units of qt_scale so no head dominates the shared encoder
        loss_t, td_t = td_loss(qt[(rows, acts)] * (1.0 / cfg.qt_scale), y_t / cfg.qt_scale, w)

        # distillation towards the acting-time projection at the next states
        g1 = H[nxt]
        oq, oqd, oqt = self.values_np(self.online, g1.data)
        _, oqd0, oqt0 = self.values_np(self.online, H.data[:, 0])
        eps_o = np.asarray(self.slack(pk0, oqd0, oqt0))[inv]
        pi_target = self.project(oq, oqd, oqt, pk_next, eps_o)
        loss_js = distill_loss(self.policy(self.online, g1), pi_target)

        total = loss_q + loss_d + loss_t + loss_js
        if not cfg.stale_encodings and self.enc_cfg.span_penalty > 0:
            total = total + self.encoder.span_penalty(self.online)

        loss_pcv = float("nan")
        if cfg.shield:
            h = self.ens_cfg.horizon
            labels, seqs = [], []
            for u, t in zip(inv, ts):
                ep = episodes[u]
                if self.ens_cfg.label_rule == "episode":
                    labels.append(float(ep.constraints.sum() > cfg.d0))
                else:
                    labels.append(window_labels(ep.constraints[t:t + h], h)[0])
                seq = list(ep.actions[t:t + h])
                seqs.append(seq + [seq[-1]] * (h - len(seq)))
            labels, seqs = np.array(labels), np.array(seqs)
            # probabilities must be fitted under the data distribution, so undo the prioritised draw fully
            wp = 1.0 / buffer.probabilities()[idx]
            wp = wp / wp.mean()
            if cfg.joint_safety and not cfg.stale_encodings:
                lp = self.ensemble.loss(self.online, g, seqs, labels, pcv_rng, weights=wp)
                total = total + lp
                loss_pcv = lp.item()
            else:
                for _ in range(cfg.pcv_updates):
                    loss_pcv = self.ensemble.train_step(self.online, self.pcv_opt, g.data, seqs, labels, pcv_rng, wp)
                self.online.zero_grad()

        losses = np.array([loss_q.item(), loss_d.item(), loss_t.item(), loss_js.item()])
        if not np.all(np.isfinite(losses)):
            raise NumericError("non-finite training loss")
        total.backward()
        if cfg.grad_clip is not None:
            nn.clip_grad_norm(self.online, cfg.grad_clip)
        nn.adam_step(self.online, self.opt)
        self.encoder.clamp_spans(self.online)
        buffer.update_priorities(idx, td_q + td_d + td_t)
        return {"loss_q": losses[0], "loss_qd": losses[1], "loss_qt": losses[2], "loss_js": losses[3],
                "loss_pcv": loss_pcv}

    # persistence ----------------------------------------------------------------------------------
    def save(self, path, extra: dict | None = None):
        arrays = dict(self.online.to_arrays())
        arrays.update({f"target/{k}": v for k, v in self.target.to_arrays().items()})
        arrays.update({f"baseline/{k}": v for k, v in self.baseline.to_arrays().items()})
        meta = {"encoder": asdict(self.enc_cfg), "ensemble": asdict(self.ens_cfg), "train": asdict(self.cfg),
                "seed": self.seed, "iteration": self.iteration, "baseline_uniform": self.baseline_uniform}
        meta.update(extra or {})
        return save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "SafeAgent":
        arrays, meta = load_arrays(path)
        agent = cls(EncoderConfig(**meta["encoder"]), EnsembleConfig(**meta["ensemble"]),
                    TrainConfig(**meta["train"]), meta.get("seed", 0))
        agent.online.load_arrays(arrays)
        agent.target.load_arrays(arrays, prefix="target/")
        agent.baseline.load_arrays(arrays, prefix="baseline/")
        agent.baseline_uniform = bool(meta.get("baseline_uniform", True))
        agent.iteration = int(meta.get("iteration", 0))
        agent.meta = meta
        return agent
