"""Stage-1 tokenizer training: joint optimization of reconstruction, residual
quantization, the MI penalty, and the sequence contrastive task.

Per step the trainer takes one estimator likelihood update (estimator
parameters only), then one joint update of everything else on
L_total = (L_recon + L_rq) + beta * L_rec + gamma * L_mim.
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .config import Stage1Config, config_dict
from .contrastive import SequenceEncoder, contrastive_accuracy, rec_contrastive_loss
from .data import ItemTable, SequenceSet
from .disentangle import (
    ConditionalGaussianEstimator,
    IdEmbedding,
    ModalityEncoderPair,
    club_mim_loss,
    estimator_nll_loss,
)
from .quantizer import (
    CodebookBank,
    ReconstructionDecoder,
    SemanticIdTable,
    assign_semantic_ids,
    collision_report,
    kmeans_init_bank,
    reseed_dead_codes,
    rq_loss,
    rq_quantize,
    straight_through,
)
from .util import np_generator, read_json, save_arrays, load_arrays, seed_component, \
    state_dict_hash, write_json

SIGNAL_ORDER = ("id", "text", "image")


class TrainingDiverged(RuntimeError):
    pass


class Stage1Model(nn.Module):
    """Encoders, codebook bank(s), decoders, MI estimators, and the sequence
    encoder for one tokenizer configuration."""

    def __init__(self, cfg: Stage1Config, n_items: int, text_dim: int, image_dim: int):
        super().__init__()
        self.cfg = cfg
        self.n_items = n_items
        self.signals = cfg.active_signals()
        self.modalities = tuple(s for s in self.signals if s != "id")
        self.in_dims = {"text": text_dim, "image": image_dim}
        d = cfg.dim

        with_specific = (not cfg.no_mim) or cfg.keep_specific_encoders
        self.with_specific = with_specific

        if "id" in self.signals:
            self.id_emb = IdEmbedding(n_items, d, seed=cfg.seed)
        else:
            self.id_emb = None

        self.encoders = nn.ModuleDict({
            m: ModalityEncoderPair(self.in_dims[m], d, with_specific=with_specific,
                                   seed=cfg.seed, name=f"enc_{m}")
            for m in self.modalities})
        self.decoders = nn.ModuleDict({
            m: ReconstructionDecoder(d, self.in_dims[m], with_specific=with_specific,
                                     seed=cfg.seed, name=f"dec_{m}")
            for m in self.modalities})
        if with_specific:
            self.estimators = nn.ModuleDict({
                m: ConditionalGaussianEstimator(d, seed=cfg.seed, name=f"club_{m}")
                for m in self.modalities})
        else:
            self.estimators = nn.ModuleDict()

        if cfg.no_shared_codebook:
            self.banks = nn.ModuleDict({
                s: CodebookBank(cfg.levels, cfg.codes, d, seed=cfg.seed, name=f"bank_{s}")
                for s in self.signals})
        else:
            shared = CodebookBank(cfg.levels, cfg.codes, d, seed=cfg.seed, name="bank")
            self.banks = nn.ModuleDict({s: shared for s in self.signals})

        if not cfg.no_rec:
            self.seq_encoder = SequenceEncoder(
                width=len(self.signals) * d, max_len=cfg.max_len,
                layers=cfg.seq_layers, heads=cfg.seq_heads, dropout=cfg.dropout,
                seed=cfg.seed)
        else:
            self.seq_encoder = None

    def bank_for(self, signal: str) -> CodebookBank:
        return self.banks[signal]

    def unique_banks(self):
        seen, out = set(), []
        for s in self.signals:
            b = self.banks[s]
            if id(b) not in seen:
                seen.add(id(b))
                out.append((s, b))
        return out

    def encode_signals(self, item_ids, text_x, image_x):
        """Behavior vectors (and specific vectors where present) per signal."""
        z_beh, z_spec = {}, {}
        for m in self.modalities:
            x = text_x if m == "text" else image_x
            spec, beh = self.encoders[m](x)
            z_beh[m], z_spec[m] = beh, spec
        if self.id_emb is not None:
            z_beh["id"] = self.id_emb(item_ids)
            z_spec["id"] = None
        return z_beh, z_spec

    def behavior_vectors(self, item_ids, text_x, image_x):
        """Concatenated straight-through quantized signals, order id|text|image
        (restricted to active signals). Bank gradients flow through unless the
        config freezes them for the contrastive path."""
        z_beh, _ = self.encode_signals(item_ids, text_x, image_x)
        parts = []
        for s in self.signals:
            result = rq_quantize(z_beh[s], self.bank_for(s))
            q = result.quantized
            if self.cfg.freeze_codebook_in_contrastive:
                q = q.detach()
            parts.append(straight_through(z_beh[s], q))
        return torch.cat(parts, dim=-1)

    @torch.no_grad()
    def frozen_signal_vectors(self, item_ids, text_x, image_x) -> dict:
        z_beh, _ = self.encode_signals(item_ids, text_x, image_x)
        return {s: z_beh[s] for s in self.signals}


@dataclass
class TrainReport:
    config: dict
    epochs: list = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: int = -1
    state_hash: str = ""

    def to_dict(self):
        return dataclasses.asdict(self)


class _ItemTensors:
    def __init__(self, items: ItemTable):
        self.text = torch.from_numpy(items.text_emb)
        self.image = torch.from_numpy(items.image_emb)
        self.n = len(items)
        if not (torch.isfinite(self.text).all() and torch.isfinite(self.image).all()):
            raise ValueError("non-finite values in item embeddings")

    def slices(self, ids: torch.Tensor):
        return self.text[ids], self.image[ids]


def training_pairs(seqs: SequenceSet, max_hist: int):
    """(user_index, prefix_length) pairs for every trainable next-item target:
    target positions 1 .. len-3 (the last two are validation and test)."""
    pairs = []
    for ui, s in enumerate(seqs):
        for t in range(1, len(s.items) - 2):
            pairs.append((ui, t))
    return np.array(pairs, dtype=np.int64)


def pad_histories(seqs: SequenceSet, pairs: np.ndarray, max_hist: int):
    """Right-padded history matrix, lengths, and targets for (user, t) pairs."""
    b = len(pairs)
    lengths = np.minimum(pairs[:, 1], max_hist)
    width = int(lengths.max())
    hist = np.zeros((b, width), dtype=np.int64)
    targets = np.empty(b, dtype=np.int64)
    for r, (ui, t) in enumerate(pairs):
        items = seqs[ui].items
        h = items[max(0, t - max_hist):t]
        hist[r, :len(h)] = h
        targets[r] = items[t]
    return (torch.from_numpy(hist), torch.from_numpy(lengths.astype(np.int64)),
            torch.from_numpy(targets))


class Stage1Trainer:
    def __init__(self, model: Stage1Model, items: ItemTable, seqs: SequenceSet,
                 cfg: Stage1Config):
        self.model = model
        self.cfg = cfg
        self.items = _ItemTensors(items)
        self.seqs = seqs
        est_params = list(model.estimators.parameters())
        est_ids = {id(p) for p in est_params}
        main_params = [p for p in model.parameters() if id(p) not in est_ids]
        self.main_opt = torch.optim.Adam(main_params, lr=cfg.lr)
        self.est_opt = torch.optim.Adam(est_params, lr=cfg.lr) if est_params else None
        self.rng = np_generator(cfg.seed, "stage1_batches")
        self.pairs = training_pairs(seqs, cfg.max_len) if not cfg.no_rec else None
        self.valid_pairs = np.array(
            [(ui, len(s.items) - 2) for ui, s in enumerate(seqs)], dtype=np.int64)

    def item_losses(self, item_ids):
        model, cfg = self.model, self.cfg
        text_x, image_x = self.items.slices(item_ids)
        z_beh, z_spec = model.encode_signals(item_ids, text_x, image_x)

        # one estimator likelihood step on this batch, before the joint step
        est_nll = 0.0
        if model.estimators and self.est_opt is not None:
            self.est_opt.zero_grad()
            nll = sum(estimator_nll_loss(z_beh[m], z_spec[m], model.estimators[m])
                      for m in model.modalities)
            nll.backward()
            self.est_opt.step()
            est_nll = float(nll.detach())

        loss_rq, loss_recon, loss_mim = 0.0, 0.0, 0.0
        usage = {}
        bank_residuals = {}
        for s in model.signals:
            bank = model.bank_for(s)
            result = rq_quantize(z_beh[s], bank)
            loss_rq = loss_rq + rq_loss(result, bank, alpha=cfg.alpha)
            u = usage.setdefault(id(bank), torch.zeros(bank.levels, bank.codes))
            for l in range(bank.levels):
                u[l].scatter_add_(0, result.codes[:, l],
                                  torch.ones(result.codes.shape[0]))
            bank_residuals.setdefault(id(bank), []).append(result.residuals.detach())
            if s != "id":
                q = straight_through(z_beh[s], result.quantized.detach())
                x = self.items.text[item_ids] if s == "text" else self.items.image[item_ids]
                x_hat = model.decoders[s](q, z_spec[s] if model.with_specific else None)
                loss_recon = loss_recon + ((x - x_hat) ** 2).sum(-1).mean()
        if model.estimators and cfg.gamma != 0.0 and not cfg.no_mim:
            loss_mim = sum(
                club_mim_loss(z_beh[m], z_spec[m], model.estimators[m],
                              grad_to_specific=cfg.mim_grad_to_specific)
                for m in model.modalities)
        # (L, M, D) residual pool per bank, drawn only from that bank's signals
        residual_pools = {bid: torch.cat(r, dim=0).transpose(0, 1)
                          for bid, r in bank_residuals.items()}
        return loss_rq, loss_recon, loss_mim, est_nll, usage, residual_pools

    def sequence_loss(self, batch_pairs):
        model, cfg = self.model, self.cfg
        hist, lengths, targets = pad_histories(self.seqs, batch_pairs, cfg.max_len)
        uniq, inverse = torch.unique(torch.cat([hist.flatten(), targets]),
                                     return_inverse=True)
        text_x, image_x = self.items.slices(uniq)
        v_uniq = model.behavior_vectors(uniq, text_x, image_x)
        v_all = v_uniq[inverse]
        v_hist = v_all[:hist.numel()].view(*hist.shape, -1)
        v_tgt = v_all[hist.numel():]
        # padded positions must not contribute keys; also zero their values
        key_valid = (torch.arange(hist.shape[1]).unsqueeze(0) < lengths.unsqueeze(1))
        v_hist = v_hist * key_valid.unsqueeze(-1)
        h = model.seq_encoder.final_state(v_hist, lengths)
        return rec_contrastive_loss(h, v_tgt, target_ids=targets, tau=cfg.tau)

    @torch.no_grad()
    def validation_accuracy(self) -> float:
        model, cfg = self.model, self.cfg
        if model.seq_encoder is None:
            return float("nan")
        model.eval()
        correct, total = 0.0, 0
        for start in range(0, len(self.valid_pairs), cfg.batch_size):
            batch = self.valid_pairs[start:start + cfg.batch_size]
            if len(batch) < 2:
                continue
            hist, lengths, targets = pad_histories(self.seqs, batch, cfg.max_len)
            uniq, inverse = torch.unique(torch.cat([hist.flatten(), targets]),
                                         return_inverse=True)
            text_x, image_x = self.items.slices(uniq)
            v_uniq = model.behavior_vectors(uniq, text_x, image_x)
            v_all = v_uniq[inverse]
            v_hist = v_all[:hist.numel()].view(*hist.shape, -1)
            key_valid = (torch.arange(hist.shape[1]).unsqueeze(0) < lengths.unsqueeze(1))
            v_hist = v_hist * key_valid.unsqueeze(-1)
            h = model.seq_encoder.final_state(v_hist, lengths)
            acc = contrastive_accuracy(h, v_all[hist.numel():], target_ids=targets)
            correct += acc * len(batch)
            total += len(batch)
        model.train()
        return correct / max(total, 1)

    def run(self, collect_collisions: bool = True) -> TrainReport:
        model, cfg = self.model, self.cfg
        report = TrainReport(config=config_dict(cfg))
        seed_component(cfg.seed, "stage1_train")
        model.train()

        if cfg.kmeans_init:
            all_ids = torch.arange(self.items.n)
            with torch.no_grad():
                vecs = model.frozen_signal_vectors(all_ids, self.items.text, self.items.image)
            for s, bank in model.unique_banks():
                if cfg.no_shared_codebook:
                    fit = vecs[s]
                else:
                    fit = torch.cat([vecs[x] for x in model.signals], dim=0)
                kmeans_init_bank(bank, fit, iters=cfg.kmeans_iters,
                                 seed=int(self.rng.integers(2**31)))

        item_order = self.rng.permutation(self.items.n)
        item_cursor = 0
        best_acc, best_state, bad_epochs = -np.inf, None, 0
        n_item_steps = max(1, int(np.ceil(self.items.n / cfg.batch_size)))

        for epoch in range(cfg.epochs):
            if self.pairs is not None:
                pair_order = self.rng.permutation(len(self.pairs))
                steps = max(1, int(np.ceil(len(self.pairs) / cfg.batch_size)))
            else:
                steps = n_item_steps
            sums = {"total": 0.0, "rq": 0.0, "recon": 0.0, "mim": 0.0,
                    "rec": 0.0, "est_nll": 0.0}
            epoch_usage = {}
            last_residuals = {}
            for step in range(steps):
                if item_cursor + cfg.batch_size > self.items.n:
                    item_order = self.rng.permutation(self.items.n)
                    item_cursor = 0
                item_ids = torch.from_numpy(
                    item_order[item_cursor:item_cursor + cfg.batch_size].copy())
                item_cursor += cfg.batch_size

                self.main_opt.zero_grad()
                loss_rq, loss_recon, loss_mim, est_nll, usage, residual_pools = \
                    self.item_losses(item_ids)
                loss_rec = 0.0
                if self.pairs is not None:
                    idx = pair_order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
                    if len(idx) >= 2:
                        loss_rec = self.sequence_loss(self.pairs[idx])
                total = loss_rq + loss_recon + cfg.beta * loss_rec + cfg.gamma * loss_mim
                fl = lambda x: float(x.detach()) if torch.is_tensor(x) else float(x)
                if not np.isfinite(fl(total)):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {step}: "
                        f"rq={fl(loss_rq):.4g} recon={fl(loss_recon):.4g} "
                        f"mim={fl(loss_mim):.4g} rec={fl(loss_rec):.4g}")
                total.backward()
                self.main_opt.step()

                sums["total"] += fl(total)
                sums["rq"] += fl(loss_rq)
                sums["recon"] += fl(loss_recon)
                sums["mim"] += fl(loss_mim)
                sums["rec"] += fl(loss_rec)
                sums["est_nll"] += est_nll
                for bank_id, u in usage.items():
                    epoch_usage[bank_id] = epoch_usage.get(bank_id, 0) + u
                last_residuals.update(residual_pools)

            reseeded = 0
            for s, bank in model.unique_banks():
                u = epoch_usage.get(id(bank))
                if u is not None and id(bank) in last_residuals:
                    reseeded += reseed_dead_codes(
                        bank, u, last_residuals[id(bank)],
                        seed=int(self.rng.integers(2**31)))

            val_acc = self.validation_accuracy()
            entry = {k: v / steps for k, v in sums.items()}
            entry["epoch"] = epoch
            entry["val_accuracy"] = val_acc
            entry["reseeded"] = reseeded
            entry["utilization"] = {
                s: [float((u[l] > 0).float().mean()) for l in range(model.cfg.levels)]
                for s, bank in model.unique_banks()
                for u in [epoch_usage.get(id(bank), torch.zeros(model.cfg.levels, 1))]}
            if collect_collisions:
                table = assign_ids_from_model(model, self.items)
                entry["collisions"] = collision_report(table.codes)[cfg.levels]
            report.epochs.append(entry)

            if self.pairs is not None and np.isfinite(val_acc):
                if val_acc > best_acc:
                    best_acc, bad_epochs = val_acc, 0
                    best_state = {k: v.detach().clone()
                                  for k, v in model.state_dict().items()}
                    report.best_epoch = epoch
                else:
                    bad_epochs += 1
                    if bad_epochs >= cfg.patience:
                        report.stopped_early = True
                        break
        if best_state is not None:
            model.load_state_dict(best_state)
        model.eval()
        report.state_hash = state_dict_hash(model.state_dict())
        return report


def assign_ids_from_model(model: Stage1Model, items) -> SemanticIdTable:
    tensors = items if isinstance(items, _ItemTensors) else _ItemTensors(items)
    all_ids = torch.arange(tensors.n)
    vectors = model.frozen_signal_vectors(all_ids, tensors.text, tensors.image)
    return assign_semantic_ids(vectors, dict(model.banks), model.signals)


def train_stage1(items: ItemTable, seqs: SequenceSet, cfg: Stage1Config,
                 collect_collisions: bool = True):
    model = Stage1Model(cfg, len(items), items.text_dim, items.image_dim)
    trainer = Stage1Trainer(model, items, seqs, cfg)
    report = trainer.run(collect_collisions=collect_collisions)
    return model, report


def save_stage1(out_dir, model: Stage1Model, cfg: Stage1Config, report: TrainReport):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    save_arrays(out_dir / "stage1.ckpt", state)
    meta = {
        "config": config_dict(cfg),
        "n_items": model.n_items,
        "text_dim": model.in_dims.get("text"),
        "image_dim": model.in_dims.get("image"),
        "state_hash": state_dict_hash(state),
        "shapes": {k: list(v.shape) for k, v in sorted(state.items())},
    }
    write_json(out_dir / "stage1_meta.json", meta)
    write_json(out_dir / "train_report.json", report.to_dict())


def load_stage1(ckpt_dir):
    ckpt_dir = Path(ckpt_dir)
    meta = read_json(ckpt_dir / "stage1_meta.json")
    cfg_values = dict(meta["config"])
    cfg = Stage1Config(**{k: tuple(v) if isinstance(v, list) else v
                          for k, v in cfg_values.items()})
    model = Stage1Model(cfg, meta["n_items"], meta["text_dim"], meta["image_dim"])
    state = load_arrays(ckpt_dir / "stage1.ckpt")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in state.items()})
    model.eval()
    return model, cfg
