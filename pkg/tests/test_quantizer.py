"""Residual quantization against a brute-force numpy oracle, plus the
straight-through and loss contracts."""

import collections

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semrec.quantizer import (
    CodebookBank,
    QuantizationResult,
    ReconstructionDecoder,
    assign_semantic_ids,
    collision_report,
    kmeans,
    kmeans_init_bank,
    read_semantic_ids_tsv,
    reseed_dead_codes,
    rq_loss,
    rq_loss_frozen,
    rq_quantize,
    straight_through,
    write_semantic_ids_tsv,
)


def oracle_greedy_rq(z, entries):
    """Exhaustive per-level nearest-neighbor scan (float64 scalar loops)."""
    z = np.asarray(z, dtype=np.float64)
    levels = entries.shape[0]
    residual = z.copy()
    codes, picked = [], []
    for l in range(levels):
        best_idx, best_d = 0, np.inf
        for j in range(entries.shape[1]):
            d = float(((residual - entries[l, j]) ** 2).sum())
            if d < best_d:  # strict: ties keep the earlier (lower) index
                best_d, best_idx = d, j
        codes.append(best_idx)
        picked.append(entries[l, best_idx].copy())
        residual = residual - entries[l, best_idx]
    return codes, np.sum(picked, axis=0), residual


def random_bank(levels=3, codes=8, dim=5, seed=0, dtype=torch.float64):
    bank = CodebookBank(levels, codes, dim, seed=seed)
    g = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        bank.entries.copy_(torch.randn(levels, codes, dim, generator=g))
    return bank.to(dtype)


class TestRqQuantize:
    def test_exact_entry_zero_residual(self):
        # z equal to a level-1 entry, with a zero entry available at deeper
        # levels: residual is exactly zero and stays there
        bank = random_bank(levels=2, codes=4, dim=3)
        with torch.no_grad():
            bank.entries[1, 2] = 0.0
        z = bank.entries[0, 3].detach().clone()
        r = rq_quantize(z, bank)
        assert r.codes.tolist() == [3, 2]
        assert torch.all(r.final_residual == 0)
        assert torch.equal(r.quantized, z)

    def test_tie_broken_to_lowest_index(self):
        bank = CodebookBank(1, 3, 2, seed=0).double()
        with torch.no_grad():
            bank.entries[0, 0] = torch.tensor([1.0, 0.0])
            bank.entries[0, 1] = torch.tensor([-1.0, 0.0])
            bank.entries[0, 2] = torch.tensor([1.0, 0.0])
        z = torch.zeros(2, dtype=torch.float64)  # equidistant from all three
        r = rq_quantize(z, bank)
        assert r.codes.tolist() == [0]

    def test_matches_oracle_on_random_batch(self):
        bank = random_bank(levels=3, codes=12, dim=6, seed=1)
        g = torch.Generator().manual_seed(5)
        z = torch.randn(40, 6, generator=g, dtype=torch.float64)
        r = rq_quantize(z, bank)
        entries = bank.entries.detach().numpy()
        for i in range(40):
            codes, q, resid = oracle_greedy_rq(z[i].numpy(), entries)
            assert r.codes[i].tolist() == codes
            np.testing.assert_allclose(r.quantized[i].detach().numpy(), q, atol=1e-12)
            np.testing.assert_allclose(r.final_residual[i].detach().numpy(), resid, atol=1e-12)

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=25, deadline=None)
    def test_sum_identity(self, seed):
        # z - sum(selected entries) == final residual, any input
        bank = random_bank(levels=3, codes=6, dim=4, seed=2)
        g = torch.Generator().manual_seed(seed)
        z = torch.randn(3, 4, generator=g, dtype=torch.float64)
        r = rq_quantize(z, bank)
        np.testing.assert_allclose(
            (z - r.quantized).detach().numpy(), r.final_residual.detach().numpy(), atol=1e-12)
        assert torch.all((0 <= r.codes) & (r.codes < 6))

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=25, deadline=None)
    def test_each_level_locally_optimal(self, seed):
        bank = random_bank(levels=2, codes=7, dim=3, seed=3)
        g = torch.Generator().manual_seed(seed)
        z = torch.randn(3, generator=g, dtype=torch.float64)
        r = rq_quantize(z, bank)
        for l in range(2):
            resid = r.residuals[l]
            dists = ((resid.unsqueeze(0) - bank.entries[l].detach()) ** 2).sum(-1)
            assert dists[r.codes[l]] == dists.min()

    def test_dim_mismatch_rejected(self):
        bank = random_bank(dim=5)
        with pytest.raises(ValueError, match="dim"):
            rq_quantize(torch.randn(2, 4).double(), bank)

    def test_shared_bank_aliasing(self):
        # one storage, three views: mutating an entry changes every signal
        bank = random_bank(levels=1, codes=2, dim=2)
        banks = {"id": bank, "text": bank, "image": bank}
        z = torch.tensor([5.0, 5.0], dtype=torch.float64)
        before = {s: rq_quantize(z, banks[s]).codes.tolist() for s in banks}
        with torch.no_grad():
            bank.entries[0, 1] = torch.tensor([5.0, 5.0])
        after = {s: rq_quantize(z, banks[s]).codes.tolist() for s in banks}
        assert all(after[s] == [1] for s in banks)
        assert before != after


class TestStraightThrough:
    def test_forward_bits_equal_quantized(self):
        g = torch.Generator().manual_seed(0)
        z = torch.randn(4, 5, generator=g, requires_grad=True)
        q = torch.randn(4, 5, generator=g)
        out = straight_through(z, q)
        assert torch.equal(out.detach(), q)

    def test_jacobian_wrt_z_is_identity(self):
        z = torch.randn(3, dtype=torch.float64, requires_grad=True)
        q = torch.randn(3, dtype=torch.float64)
        jac = torch.autograd.functional.jacobian(lambda t: straight_through(t, q), z)
        np.testing.assert_allclose(jac.numpy(), np.eye(3), atol=1e-12)

    def test_squared_norm_grad_is_2q(self):
        z = torch.randn(6, dtype=torch.float64, requires_grad=True)
        q = torch.randn(6, dtype=torch.float64)
        (straight_through(z, q) ** 2).sum().backward()
        np.testing.assert_allclose(z.grad.numpy(), (2 * q).numpy(), atol=1e-12)

    def test_quantized_argument_keeps_graph(self):
        # passing a live quantized tensor lets gradient reach the bank
        bank = random_bank(levels=2, codes=4, dim=3)
        z = torch.randn(2, 3, dtype=torch.float64, requires_grad=True)
        r = rq_quantize(z, bank)
        straight_through(z, r.quantized).sum().backward()
        assert bank.entries.grad is not None and bank.entries.grad.abs().sum() > 0
        # detached quantized blocks it
        bank.entries.grad = None
        r = rq_quantize(z, bank)
        straight_through(z, r.quantized.detach()).sum().backward()
        assert bank.entries.grad is None or torch.all(bank.entries.grad == 0)


class TestRqLoss:
    def test_zero_when_quantization_exact(self):
        bank = random_bank(levels=2, codes=4, dim=3)
        with torch.no_grad():
            bank.entries[1, 0] = 0.0
        z = bank.entries[0, 1].detach().clone().unsqueeze(0)
        r = rq_quantize(z, bank)
        assert rq_loss(r, bank).item() == pytest.approx(0.0, abs=1e-24)

    def test_hand_computed_single_level(self):
        # one level, one entry c, input z: loss = ||z-c||^2 (1 + alpha)
        bank = CodebookBank(1, 1, 2, seed=0).double()
        with torch.no_grad():
            bank.entries[0, 0] = torch.tensor([1.0, 2.0])
        z = torch.tensor([[3.0, 2.0]], dtype=torch.float64)
        r = rq_quantize(z, bank)
        want = 4.0 * (1 + 0.25)
        assert rq_loss(r, bank, alpha=0.25).item() == pytest.approx(want, rel=1e-12)

    def test_term_routing(self):
        # dictionary term moves only the bank; commitment only the encoder
        bank = random_bank(levels=2, codes=5, dim=4)
        z = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        r = rq_quantize(z, bank)
        loss = rq_loss(r, bank, alpha=0.0)  # commitment off
        gz = torch.autograd.grad(loss, z, retain_graph=True, allow_unused=True)[0]
        assert gz is None or torch.all(gz == 0)
        gbank = torch.autograd.grad(loss, bank.entries)[0]
        assert gbank.abs().sum() > 0

    def test_commitment_grad_wrt_encoder(self):
        # analytic: d/dz sum_l alpha ||z^l - c^l||^2 = 2 alpha sum_l (z^l - c^l)
        bank = random_bank(levels=3, codes=6, dim=4)
        z = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
        r = rq_quantize(z, bank)
        loss = rq_loss(r, bank, alpha=0.25)
        gz = torch.autograd.grad(loss, z)[0]
        with torch.no_grad():
            expect = torch.zeros_like(z)
            for l in range(3):
                c = bank.entries[l][r.codes[:, l]]
                expect += 2 * 0.25 * (r.residuals[:, l] - c)
            expect /= z.shape[0]  # batch mean
        np.testing.assert_allclose(gz.numpy(), expect.numpy(), atol=1e-12)

    def test_gradients_match_frozen_finite_differences(self):
        # FD reference evaluates the loss with stop-gradient arguments frozen
        # at their forward values, which is the meaning of sg[.]
        bank = random_bank(levels=2, codes=4, dim=3, seed=7)
        g = torch.Generator().manual_seed(1)
        z = torch.randn(3, 3, generator=g, dtype=torch.float64, requires_grad=True)
        r = rq_quantize(z, bank)
        loss = rq_loss(r, bank, alpha=0.25)
        gz, gbank = torch.autograd.grad(loss, [z, bank.entries])

        codes = r.codes.detach()
        z_levels = r.residuals.detach().clone()
        selected = [bank.entries[l].detach()[codes[:, l]].clone() for l in range(2)]
        h = 1e-6

        def frozen(z_val, entries_val):
            return rq_loss_frozen(z_val, entries_val, codes, z_levels, selected,
                                  alpha=0.25).item()

        base_entries = bank.entries.detach().clone()
        fd_z = torch.zeros_like(z.detach()).view(-1)
        flat = z.detach().clone().view(-1)
        for k in range(flat.numel()):
            for sgn in (1.0, -1.0):
                bumped = flat.clone()
                bumped[k] += sgn * h
                fd_z[k] += sgn * frozen(bumped.view(z.shape), base_entries)
        fd_z = (fd_z / (2 * h)).view(z.shape)
        rel = (fd_z - gz).norm() / gz.norm()
        assert rel < 1e-4

        fd_b = torch.zeros_like(base_entries).view(-1)
        flat_b = base_entries.clone().view(-1)
        for k in range(flat_b.numel()):
            for sgn in (1.0, -1.0):
                bumped = flat_b.clone()
                bumped[k] += sgn * h
                fd_b[k] += sgn * frozen(z.detach(), bumped.view(base_entries.shape))
        fd_b = (fd_b / (2 * h)).view(base_entries.shape)
        rel_b = (fd_b - gbank).norm() / gbank.norm()
        assert rel_b < 1e-4


class TestDecoder:
    def test_concat_order_and_shapes(self):
        dec = ReconstructionDecoder(4, 10, seed=0).double()
        q = torch.randn(3, 4, dtype=torch.float64)
        s = torch.randn(3, 4, dtype=torch.float64)
        out = dec(q, s)
        assert out.shape == (3, 10)
        # manual forward: relu(cat(q, s) W1^T + b1) W2^T + b2
        w1, b1 = dec.net[0].weight, dec.net[0].bias
        w2, b2 = dec.net[2].weight, dec.net[2].bias
        hand = torch.relu(torch.cat([q, s], -1) @ w1.T + b1) @ w2.T + b2
        np.testing.assert_allclose(out.detach().numpy(), hand.detach().numpy(), atol=1e-12)

    def test_missing_specific_vector_rejected(self):
        dec = ReconstructionDecoder(4, 10, seed=0)
        with pytest.raises(ValueError):
            dec(torch.randn(2, 4))

    def test_no_specific_branch_input_dim(self):
        dec = ReconstructionDecoder(4, 10, with_specific=False, seed=0)
        assert dec(torch.randn(2, 4)).shape == (2, 10)

    def test_overfits_identity_on_tiny_problem(self):
        torch.manual_seed(0)
        dec = ReconstructionDecoder(3, 3, with_specific=False, seed=1)
        opt = torch.optim.Adam(dec.parameters(), lr=1e-2)
        x = torch.randn(16, 3)
        for _ in range(400):
            opt.zero_grad()
            ((dec(x) - x) ** 2).mean().backward()
            opt.step()
        assert ((dec(x) - x) ** 2).mean().item() < 1e-2


class TestKmeans:
    def test_deterministic(self):
        x = torch.randn(100, 4, generator=torch.Generator().manual_seed(0))
        a = kmeans(x, 5, seed=3)
        b = kmeans(x, 5, seed=3)
        assert torch.equal(a, b)

    def test_recovers_separated_clusters(self):
        g = torch.Generator().manual_seed(1)
        centers = torch.tensor([[0.0, 0.0], [10.0, 10.0], [-10.0, 10.0]])
        x = torch.cat([centers[i] + 0.05 * torch.randn(30, 2, generator=g) for i in range(3)])
        fitted = kmeans(x, 3, seed=0)
        dists = ((fitted.unsqueeze(1) - centers.unsqueeze(0)) ** 2).sum(-1)
        assert dists.min(dim=0).values.max() < 0.1

    def test_bank_init_levels_fit_residuals(self):
        bank = CodebookBank(2, 4, 3, seed=0)
        g = torch.Generator().manual_seed(2)
        vecs = torch.randn(64, 3, generator=g)
        kmeans_init_bank(bank, vecs, seed=5)
        # quantizing the fit set with the initialized bank leaves residuals
        # smaller than the raw vectors on average
        r = rq_quantize(vecs, bank)
        assert r.final_residual.norm(dim=1).mean() < vecs.norm(dim=1).mean()

    def test_reseed_dead_codes(self):
        bank = CodebookBank(2, 4, 3, seed=0)
        usage = torch.ones(2, 4)
        usage[0, 2] = 0
        usage[1, 0] = 0
        sample = torch.randn(10, 3)
        before = bank.entries.detach().clone()
        n = reseed_dead_codes(bank, usage, sample, seed=1)
        assert n == 2
        assert not torch.equal(bank.entries[0, 2], before[0, 2])
        assert torch.equal(bank.entries[0, 0], before[0, 0])


class TestSemanticIds:
    def build_table(self, n=30, seed=0):
        bank = random_bank(levels=2, codes=3, dim=4, seed=seed, dtype=torch.float32)
        g = torch.Generator().manual_seed(seed)
        vectors = {s: torch.randn(n, 4, generator=g) for s in ("id", "text", "image")}
        banks = {s: bank for s in ("id", "text", "image")}
        return assign_semantic_ids(vectors, banks, ("id", "text", "image"))

    def test_deterministic(self):
        a = self.build_table(seed=4)
        b = self.build_table(seed=4)
        np.testing.assert_array_equal(a.codes, b.codes)
        np.testing.assert_array_equal(a.disambiguation, b.disambiguation)

    def test_collision_report_matches_duplicate_scan(self):
        table = self.build_table(n=60, seed=1)  # few codes -> collisions likely
        report = collision_report(table.codes)
        for p in range(1, table.levels + 1):
            counter = collections.Counter(
                tuple(table.codes[i, :p].reshape(-1).tolist()) for i in range(table.n_items))
            expected = sum(c for c in counter.values() if c >= 2)
            assert report[p] == expected
        # prefixes can only merge groups: counts grow as prefixes shorten
        assert report[1] >= report[table.levels]

    def test_disambiguation_only_for_colliders(self):
        table = self.build_table(n=60, seed=1)
        res = table.resolution_map()
        for key, members in res.items():
            if len(members) == 1:
                assert table.disambiguation[members[0]] == -1
            else:
                assert [table.disambiguation[i] for i in members] == list(range(len(members)))

    def test_tsv_roundtrip(self, tmp_path):
        table = self.build_table(n=40, seed=2)
        path = tmp_path / "ids.tsv"
        write_semantic_ids_tsv(path, table)
        back = read_semantic_ids_tsv(path, table.signals)
        np.testing.assert_array_equal(back.codes, table.codes)
        np.testing.assert_array_equal(back.disambiguation, table.disambiguation)
        # format spot-check: level groups joined by ' | ', codes by ','
        line = path.read_text().splitlines()[0]
        item, id_part = line.split("\t")
        assert item == "0" and len(id_part.split("|")) == table.levels
