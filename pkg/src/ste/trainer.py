"""The alternating optimization loop: erasing-model steps and policy phases.

Every training step synthesizes a fresh batch (uniform styles during
warm-up, policy styles afterwards), runs one discriminator update and one
generator update, and advances the difficulty EMA. Every
``policy_cadence`` steps a policy phase samples ``reward_batch`` styles,
scores them on a frozen model snapshot, and applies one masked REINFORCE
update. Model and policy updates never interleave.

All randomness is drawn from generators keyed by (seed, kind, index), so a
run resumed from a checkpoint at step k replays exactly the trajectory of
an uninterrupted run.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import nn
from . import style as st
from .adversary import Discriminator, d_text_loss, lsgan_losses, r_real
from .dataio import RunConfig, load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, PlacementError, SteError
from .image import read_png, resize_bilinear
from .metrics import psnr, ssim
from .models import (EraseGenerator, LossWeights, composite_oriented, total_loss)
from .mser import MserParams
from .policy import (DifficultyState, PolicyNet, ReinforceBatch, combine_rewards,
                     encode_state, r_diff, update_l_mean)
from .synth import Synthesizer, TextAnnotation

# rng stream kinds
_K_INIT, _K_BATCH, _K_POLICY, _K_EVAL = 0, 1, 2, 3

LOSS_HEADER = "step,l_adv,l_rec,l_mask,l_te,total"


@dataclass
class Schedule:
    batch_size: int
    policy_cadence: int
    reward_batch: int
    lr_gen: float
    lr_disc: float
    lr_policy: float
    total_steps: int
    eval_every: int

    @classmethod
    def from_config(cls, cfg: RunConfig):
        return cls(cfg.batch_size, cfg.policy_cadence, cfg.reward_batch,
                   cfg.lr_gen, cfg.lr_disc, cfg.lr_policy,
                   cfg.total_steps, cfg.eval_every)


@dataclass
class LoadedRecord:
    image: np.ndarray            # (S, S, 3) float32
    annotations: list
    blanks: list
    orig_mask: np.ndarray        # (S, S) uint8, annotation boxes filled
    state: np.ndarray            # policy descriptor


def _scale_rect(rect, sx, sy, size):
    x0, y0, x1, y1 = rect
    x0 = int(np.floor(x0 * sx))
    y0 = int(np.floor(y0 * sy))
    x1 = int(np.ceil(x1 * sx))
    y1 = int(np.ceil(y1 * sy))
    x0, y0 = max(0, min(x0, size - 2)), max(0, min(y0, size - 2))
    x1, y1 = max(x0 + 1, min(x1, size)), max(y0 + 1, min(y1, size))
    return (x0, y0, x1, y1)


def load_records(manifest_records, image_size):
    """Read, resize and annotate manifest records for training."""
    out = []
    for rec in manifest_records:
        img = read_png(rec.image_path)
        if img.shape[2] == 1:
            img = np.repeat(img, 3, axis=2)
        h, w = img.shape[:2]
        sx, sy = image_size / w, image_size / h
        img = resize_bilinear(img, image_size, image_size)
        anns = [TextAnnotation(_scale_rect(a.bbox, sx, sy, image_size), a.content)
                for a in rec.texts]
        blanks = [_scale_rect(b, sx, sy, image_size) for b in rec.blanks]
        orig = np.zeros((image_size, image_size), dtype=np.uint8)
        for a in anns:
            x0, y0, x1, y1 = a.bbox
            orig[y0:y1, x0:x1] = 1
        out.append(LoadedRecord(img, anns, blanks, orig, encode_state(img, anns)))
    return out


def _to_batch_tensors(samples):
    i_syn = np.stack([s.i_syn.transpose(2, 0, 1) for s in samples]).astype(np.float32)
    m_syn = np.stack([s.m_syn[None, :, :] for s in samples]).astype(np.float32)
    gt = np.stack([s.ground_truth.transpose(2, 0, 1) for s in samples]).astype(np.float32)
    return i_syn, m_syn, gt


class Trainer:
    def __init__(self, records, config: RunConfig, out_dir=None):
        if not records:
            raise ConfigError("training needs at least one manifest record")
        self.cfg = config
        self.schedule = Schedule.from_config(config)
        self.out_dir = out_dir
        self.records = (records if isinstance(records[0], LoadedRecord)
                        else load_records(records, config.image_size))

        space = None
        fonts = None
        from .fonts import discover_fonts

        fonts = discover_fonts(config.font_dir or None)
        space = st.default_space(fonts)
        if config.style_sizes:
            sizes = tuple(int(v) for v in config.style_sizes.split(","))
            space = st.replace_element_choices(space, "size", sizes)
        mser_params = MserParams(delta=config.mser_delta, min_area=config.mser_min_area,
                                 max_variation=config.mser_max_variation)
        self.synth = Synthesizer(space=space, mser_params=mser_params)
        self.space = space

        init = np.random.SeedSequence((config.seed, _K_INIT)).spawn(3)
        self.gen = EraseGenerator(rng=np.random.default_rng(init[0]))
        self.disc = Discriminator(rng=np.random.default_rng(init[1]))
        self.policy = PolicyNet(space, rng=np.random.default_rng(init[2]))

        self.weights = LossWeights(l_adv=config.lambda_adv, l_rec=config.lambda_rec,
                                   l_mask=config.lambda_mask, l_te=config.lambda_te,
                                   gamma=config.gamma)
        self.difficulty = DifficultyState(l_mean=0.0, momentum=config.ema_momentum,
                                          alpha=config.alpha_diff)
        self.step = 0
        self.diagnostics = []

        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            config.dump(os.path.join(out_dir, "resolved-config"))

    # ------------------------------------------------------------------

    def _rng(self, kind, index):
        return np.random.default_rng(np.random.SeedSequence((self.cfg.seed, kind, index)))

    def _pick_record(self, rng):
        return self.records[int(rng.integers(len(self.records)))]

    def synth_batch(self, step):
        """Synthesize one training batch with the current sampling regime."""
        rng = self._rng(_K_BATCH, step)
        use_policy = self.cfg.policy_enabled and step > self.cfg.warmup_steps
        samples = []
        failures = 0
        while len(samples) < self.schedule.batch_size:
            rec = self._pick_record(rng)
            if use_policy:
                sv, _ = self.policy.sample_style(rec.state, rng)
            else:
                sv = st.sample_uniform(self.space, rng)
            try:
                samples.append((self.synth.synthesize(rec.image, rec.annotations,
                                                      rec.blanks, sv), rec))
            except PlacementError:
                failures += 1
                if failures > 10 * self.schedule.batch_size:
                    raise
        return samples

    # ------------------------------------------------------------------

    def train_step(self, step, batch):
        """One discriminator update then one generator update; returns the loss row."""
        samples = [s for s, _ in batch]
        records = [r for _, r in batch]
        i_syn, m_syn, gt = _to_batch_tensors(samples)
        orig = np.stack([r.orig_mask[None, :, :] for r in records]).astype(np.float32)
        orig = orig * (1.0 - m_syn)        # keep the masks disjoint

        # one generator forward serves both phases: the discriminator step
        # reads detached values, the generator step backprops the graph
        gpass = self.gen.forward(i_syn, m_syn)
        i_pred_np = _np_composite(i_syn, gpass.i_r.data, m_syn,
                                  self.cfg.composite_orientation)
        real_scores = self.disc.patch_scores(gt)
        fake_scores = self.disc.patch_scores(i_pred_np)
        text_map = self.disc.text_map(gpass.g_feat.data.copy())
        d_adv, _ = lsgan_losses(real_scores, fake_scores)
        d_text = d_text_loss(text_map, orig, m_syn)
        d_total = nn.add(d_adv, d_text)
        self.disc.params.zero_grads()
        d_total.backward()
        nn.adam_step(self.disc.params, self.schedule.lr_disc)

        # generator step; adversarial term flows through frozen (updated) D
        i_pred = composite_oriented(nn.as_tensor(i_syn), gpass.i_r, nn.as_tensor(m_syn),
                                    self.cfg.composite_orientation)
        _, g_adv = lsgan_losses(real_scores.detach(), self.disc.patch_scores(i_pred))
        total, breakdown = total_loss(gpass, i_syn, m_syn, gt, self.weights, g_adv,
                                      self.cfg.composite_orientation)
        self.gen.params.zero_grads()
        total.backward()
        nn.adam_step(self.gen.params, self.schedule.lr_gen)
        self.disc.params.zero_grads()      # discard grads leaked through the adv term

        self.difficulty = update_l_mean(self.difficulty, breakdown.extra["rec_main"])
        return {"step": step, "l_adv": breakdown.l_adv, "l_rec": breakdown.l_rec,
                "l_mask": breakdown.l_mask, "l_te": breakdown.l_te,
                "total": breakdown.total, "d_loss": d_total.item()}

    # ------------------------------------------------------------------

    def policy_update_phase(self, phase_idx):
        """Score ``reward_batch`` sampled styles on a snapshot; one REINFORCE step."""
        rng = self._rng(_K_POLICY, phase_idx)
        gen_hash = self.gen.params.state_hash()
        disc_hash = self.disc.params.state_hash()

        states, choices, logps, hier, samples = [], [], [], [], []
        attempts = 0
        while len(states) < self.schedule.reward_batch:
            rec = self._pick_record(rng)
            sv, lp = self.policy.sample_style(rec.state, rng)
            try:
                sample = self.synth.synthesize(rec.image, rec.annotations, rec.blanks, sv)
            except PlacementError:
                attempts += 1
                if attempts > 10 * self.schedule.reward_batch:
                    raise
                continue
            samples.append(sample)
            states.append(rec.state)
            choices.append(sv.choices)
            logps.append(lp)
            hier.append(st.hierarchy_mask(self.space, sv))

        rr_arr, rd_arr = [], []
        chunk = 25
        for lo in range(0, len(samples), chunk):
            part = samples[lo:lo + chunk]
            i_syn, m_syn, gt = _to_batch_tensors(part)
            with nn.no_grad():
                snap = self.gen.forward(i_syn, m_syn)
                tm = self.disc.text_map(snap.g_feat.data)
                i_pred = _np_composite(i_syn, snap.i_r.data, m_syn,
                                       self.cfg.composite_orientation)
            for b, sample in enumerate(part):
                rr_arr.append(r_real(tm.data[b, 0], sample.m_syn.astype(np.float32)))
                loss_l1 = float(np.abs(i_pred[b] - gt[b]).mean())
                rd_arr.append(r_diff(loss_l1, self.difficulty))

        rewards = combine_rewards(np.asarray(rr_arr), np.asarray(rd_arr),
                                  self.cfg.alpha1, self.cfg.alpha2)
        batch = ReinforceBatch(
            states=np.asarray(states, dtype=np.float32),
            choices=np.asarray(choices, dtype=np.int64),
            log_probs=np.asarray(logps, dtype=np.float64),
            hierarchy=np.asarray(hier, dtype=np.int8),
            r_real=np.asarray(rr_arr), r_diff=np.asarray(rd_arr), rewards=rewards,
        )
        self.policy.reinforce_update(batch, self.schedule.lr_policy)

        if self.gen.params.state_hash() != gen_hash or self.disc.params.state_hash() != disc_hash:
            raise ContractError("policy phase must not touch erasing-model parameters")
        return batch

    # ------------------------------------------------------------------
    # persistence

    def merged_params(self):
        merged = nn.ParamSet()
        for prefix, ps in (("gen", self.gen.params), ("disc", self.disc.params),
                           ("policy", self.policy.params)):
            for name, t in ps.params.items():
                key = f"{prefix}/{name}"
                merged.params[key] = t
                merged.adam_m[key] = ps.adam_m[name]
                merged.adam_v[key] = ps.adam_v[name]
                merged.adam_step_count[key] = ps.adam_step_count[name]
        return merged

    def save(self, path):
        save_checkpoint(self.merged_params(), path)
        state = {"step": self.step, "l_mean": self.difficulty.l_mean,
                 "fingerprint": self.cfg.fingerprint()}
        with open(path + ".state.json", "w", encoding="utf-8") as fh:
            json.dump(state, fh, sort_keys=True)
            fh.write("\n")

    def load(self, path):
        loaded = load_checkpoint(path)
        for prefix, ps in (("gen", self.gen.params), ("disc", self.disc.params),
                           ("policy", self.policy.params)):
            for name, t in ps.params.items():
                key = f"{prefix}/{name}"
                if key not in loaded.params:
                    raise ContractError(f"checkpoint missing parameter {key}")
                src = loaded.params[key]
                if src.data.shape != t.data.shape:
                    raise ContractError(f"checkpoint shape mismatch for {key}")
                t.data[...] = src.data
                ps.adam_m[name][...] = loaded.adam_m[key]
                ps.adam_v[name][...] = loaded.adam_v[key]
                ps.adam_step_count[name] = loaded.adam_step_count[key]
        state_path = path + ".state.json"
        if os.path.exists(state_path):
            with open(state_path, encoding="utf-8") as fh:
                state = json.load(fh)
            self.step = int(state["step"])
            self.difficulty = DifficultyState(l_mean=float(state["l_mean"]),
                                              momentum=self.cfg.ema_momentum,
                                              alpha=self.cfg.alpha_diff)

    # ------------------------------------------------------------------

    def run(self, progress=None):
        """Train to ``total_steps``; returns the list of loss rows."""
        rows = []
        loss_path = os.path.join(self.out_dir, "loss.csv") if self.out_dir else None
        if loss_path and self.step == 0:
            with open(loss_path, "w", encoding="utf-8") as fh:
                fh.write(LOSS_HEADER + "\n")
        for step in range(self.step + 1, self.schedule.total_steps + 1):
            self.step = step
            batch = self.synth_batch(step)
            row = self.train_step(step, batch)
            rows.append(row)
            if loss_path:
                with open(loss_path, "a", encoding="utf-8") as fh:
                    fh.write(_format_row(row) + "\n")
            if self.cfg.policy_enabled and step % self.schedule.policy_cadence == 0:
                try:
                    self.policy_update_phase(step // self.schedule.policy_cadence)
                except SteError as err:
                    self.diagnostics.append(f"step {step}: policy phase skipped: {err}")
            if self.out_dir and step % self.schedule.eval_every == 0:
                self.save(os.path.join(self.out_dir, f"step_{step:06d}.ckpt"))
            if progress:
                progress(step, row)
        if self.out_dir:
            self.save(os.path.join(self.out_dir, "final.ckpt"))
        return rows

    # ------------------------------------------------------------------

    def evaluate_records(self, records, seed=0, samples_per_record=1):
        """Held-out metrics on freshly synthesized pairs (uniform styles)."""
        if records and not isinstance(records[0], LoadedRecord):
            records = load_records(records, self.cfg.image_size)
        rng = self._rng(_K_EVAL, seed)
        l1s, psnrs, ssims, gaps = [], [], [], []
        for rec in records:
            for _ in range(samples_per_record):
                sv = st.sample_uniform(self.space, rng)
                try:
                    sample = self.synth.synthesize(rec.image, rec.annotations,
                                                   rec.blanks, sv)
                except PlacementError:
                    continue
                i_syn, m_syn, gt = _to_batch_tensors([sample])
                with nn.no_grad():
                    p = self.gen.forward(i_syn, m_syn)
                i_pred = _np_composite(i_syn, p.i_r.data, m_syn,
                                       self.cfg.composite_orientation)[0]
                pred_img = np.clip(i_pred.transpose(1, 2, 0), 0.0, 1.0)
                gt_img = sample.ground_truth.astype(np.float64)
                l1s.append(float(np.abs(pred_img - gt_img).mean()))
                psnrs.append(psnr(pred_img, gt_img))
                ssims.append(ssim(pred_img, gt_img))
                gaps.append(float(np.abs(p.i_r.data - p.i_c.data).mean()))
        if not l1s:
            raise ContractError("no held-out pairs could be synthesized")
        return {"l1": float(np.mean(l1s)), "psnr": float(np.mean(psnrs)),
                "ssim": float(np.mean(ssims)), "refine_vs_coarse": float(np.mean(gaps)),
                "count": len(l1s)}


def _np_composite(i_syn, i_r, m_syn, orientation):
    if orientation == "as-printed":
        return m_syn * i_syn + (1.0 - m_syn) * i_r
    return m_syn * i_r + (1.0 - m_syn) * i_syn


def _format_row(row):
    return (f"{row['step']},{row['l_adv']:.8g},{row['l_rec']:.8g},"
            f"{row['l_mask']:.8g},{row['l_te']:.8g},{row['total']:.8g}")
