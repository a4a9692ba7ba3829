"""Tests for the visit-sequence autoencoder."""

import numpy as np
import pytest

from trace_seq import autoencoder as ae
from trace_seq import numkit as nk
from trace_seq.errors import ValidationError

from toys import toy_autoencoder, toy_sequences, toy_space


def _np_gru(h, x, gru):
    """Independent numpy replica of the gated recurrent update."""
    r = 1 / (1 + np.exp(-(x @ gru.w_ir.data + h @ gru.w_hr.data + gru.b_r.data)))
    z = 1 / (1 + np.exp(-(x @ gru.w_iz.data + h @ gru.w_hz.data + gru.b_z.data)))
    n = np.tanh(x @ gru.w_in.data + r * (h @ gru.w_hn.data) + gru.b_n.data)
    return (1 - z) * h + z * n


class TestEmbedAndDownsize:
    def test_zero_input_gives_zero(self):
        space = toy_space()
        params, _ = toy_autoencoder(space)
        out = ae.embed_and_downsize(np.zeros(space.dim), params.encoder)
        np.testing.assert_array_equal(out.data, np.zeros((5, 8)))

    def test_single_active_feature_is_rank_one(self):
        space = toy_space()
        params, _ = toy_autoencoder(space)
        enc = params.encoder
        i, value = 7, 1.7
        x = np.zeros(space.dim)
        x[i] = value
        out = ae.embed_and_downsize(x, enc).data
        want = np.outer(enc.w_downsize.data[:, i], value * enc.w_embed.data[i])
        np.testing.assert_allclose(out, want, atol=1e-12)
        assert np.linalg.matrix_rank(out) == 1

    def test_numeric_tail_contribution_is_homogeneous(self):
        space = toy_space()
        params, _ = toy_autoencoder(space)
        base = np.zeros(space.dim)
        base[3] = 1.0
        tail = np.zeros(space.dim)
        tail[-1] = 2.5
        z_base = ae.embed_and_downsize(base, params.encoder).data
        z_one = ae.embed_and_downsize(base + tail, params.encoder).data
        z_two = ae.embed_and_downsize(base + 2 * tail, params.encoder).data
        np.testing.assert_allclose(z_two - z_base, 2 * (z_one - z_base), atol=1e-12)


class TestTransformerEncode:
    def test_attention_rows_sum_to_one(self):
        space = toy_space()
        params, _ = toy_autoencoder(space)
        rng = np.random.default_rng(0)
        for _ in range(5):
            z = rng.normal(size=(5, 8)) * rng.uniform(0.5, 4)
            _, attn = ae.transformer_encode(z, params.encoder.visit)
            np.testing.assert_allclose(attn.data.sum(axis=1), 1.0, atol=1e-9)
            assert np.all(attn.data >= 0)

    def test_row_permutation_equivariance(self):
        space = toy_space()
        params, _ = toy_autoencoder(space)
        rng = np.random.default_rng(1)
        z = rng.normal(size=(5, 8))
        perm = rng.permutation(5)
        x1, a1 = ae.transformer_encode(z, params.encoder.visit)
        x2, a2 = ae.transformer_encode(z[perm], params.encoder.visit)
        np.testing.assert_allclose(x2.data, x1.data[perm], atol=1e-12)
        np.testing.assert_allclose(a2.data, a1.data[perm][:, perm], atol=1e-12)

    def test_gradient_check_toy_block(self):
        vis = toy_autoencoder(toy_space())[0].encoder.visit
        z = nk.Param("z", np.random.default_rng(2).normal(size=(4, 8)))
        proj = np.random.default_rng(3).normal(size=(4, 8))

        def loss_fn():
            x, _ = ae.transformer_encode(z, vis, mode="eval")
            return nk.asum(nk.mul(x, nk.constant(proj)))

        report = nk.finite_diff_check(loss_fn, [z] + vis.params(), h=1e-5)
        assert report.max_rel_error < 1e-4


class TestPoolAndEncode:
    def test_single_step_equals_gru_from_zero(self):
        space = toy_space()
        params, _ = toy_autoencoder(space)
        x = np.random.default_rng(4).normal(size=(5, 8))
        vs, ep = ae.pool_and_encode([nk.constant(x)], params.encoder)
        want = nk.gru_step(np.zeros(8), x.mean(axis=0), params.encoder.rnn)
        np.testing.assert_allclose(ep.data, want.data, atol=1e-12)

    def test_constant_rows_pool_to_that_row(self):
        space = toy_space()
        params, _ = toy_autoencoder(space)
        row = np.random.default_rng(5).normal(size=8)
        vs, _ = ae.pool_and_encode([nk.constant(np.tile(row, (5, 1)))], params.encoder)
        np.testing.assert_allclose(vs[0].data, row, atol=1e-12)

    def test_three_step_manual_unroll(self):
        space = toy_space()
        params, _ = toy_autoencoder(space)
        rng = np.random.default_rng(6)
        xs = [rng.normal(size=(5, 8)) for _ in range(3)]
        _, ep = ae.pool_and_encode([nk.constant(x) for x in xs], params.encoder)
        h = np.zeros(8)
        for x in xs:
            h = _np_gru(h, x.mean(axis=0), params.encoder.rnn)
        np.testing.assert_allclose(ep.data, h, atol=1e-12)

    def test_empty_sequence_rejected(self):
        params, _ = toy_autoencoder(toy_space())
        with pytest.raises(ValidationError):
            ae.pool_and_encode([], params.encoder)


class TestDecodeAndLoss:
    def test_strong_logits_drive_ce_to_target_entropy(self):
        space = toy_space()
        params, _ = toy_autoencoder(space)
        seqs = toy_sequences(space, n_patients=1, n_visits=1, seed=7)
        vecs = seqs[0][0]
        dec = params.decoder
        # force each head to produce its target regardless of the hidden state
        for p in dec.params():
            p.data[...] = 0.0
        vec = vecs[0]
        dec.b_codes.data[...] = 1000.0 * vec.x  # single-code visit: entropy 0
        obs_target = vec.d[: space.n_observations]
        dec.b_obs.data[...] = 1000.0 * obs_target
        demo = vec.d[space.n_observations : space.n_observations + space.n_demographics]
        dec.b_demo.data[...] = np.where(demo > 0, 60.0, -60.0)
        dec.b_num.data[...] = vec.d[-2:]
        total, parts = ae.decode_and_loss(nk.constant(np.zeros(8)), vecs, dec, space)
        assert parts["codes"] < 1e-9
        assert parts["observations"] < 1e-9
        assert parts["demographics"] < 1e-9
        assert parts["numerics"] < 1e-20

    def test_total_matches_standalone_head_formulas(self):
        space = toy_space()
        params, _ = toy_autoencoder(space)
        seqs = toy_sequences(space, n_patients=1, n_visits=2, seed=8)
        vecs = seqs[0][0]
        ep = np.random.default_rng(9).normal(size=8)
        total, _ = ae.decode_and_loss(nk.constant(ep), vecs, params.decoder, space)

        # independent replay with standalone formulas
        dec = params.decoder
        h = np.zeros(8)
        want = 0.0
        for vec in vecs:
            h = _np_gru(h, ep, dec.rnn)
            logits = h @ dec.w_codes.data + dec.b_codes.data
            target = vec.x / vec.x.sum()
            logp = logits - (np.log(np.sum(np.exp(logits - logits.max()))) + logits.max())
            want += -(target * logp).sum()
            obs_t = vec.d[: space.n_observations]
            if obs_t.sum() > 0:
                logits = h @ dec.w_obs.data + dec.b_obs.data
                t = obs_t / obs_t.sum()
                logp = logits - (np.log(np.sum(np.exp(logits - logits.max()))) + logits.max())
                want += -(t * logp).sum()
            demo_t = vec.d[space.n_observations : space.n_observations + space.n_demographics]
            p = 1 / (1 + np.exp(-(h @ dec.w_demo.data + dec.b_demo.data)))
            p = np.clip(p, 1e-12, 1 - 1e-12)
            want += -(demo_t * np.log(p) + (1 - demo_t) * np.log1p(-p)).mean()
            num_t = vec.d[-2:]
            pred = h @ dec.w_num.data + dec.b_num.data
            want += ((pred - num_t) ** 2).mean()
        want /= len(vecs)
        assert abs(float(total.data) - want) < 1e-10


class TestEncodeSequence:
    def test_absent_features_do_not_affect_embedding(self):
        space = toy_space()
        params, _ = toy_autoencoder(space)
        seqs = toy_sequences(space, n_patients=1, n_visits=2, seed=10)
        vecs = seqs[0][0]
        ep1 = ae.encode_sequence(vecs, params.encoder).patient_embedding.data

        # widen the feature space with always-zero columns and junk rows
        rng = np.random.default_rng(11)
        wider_embed = np.vstack([params.encoder.w_embed.data, rng.normal(size=(3, 8))])
        wider_downsize = np.hstack([params.encoder.w_downsize.data, rng.normal(size=(5, 3))])
        enc2 = toy_autoencoder(space)[0].encoder
        enc2.w_embed = nk.Param("enc.embed", wider_embed)
        enc2.w_downsize = nk.Param("enc.downsize", wider_downsize)
        for p_dst, p_src in zip(enc2.visit.params(), params.encoder.visit.params()):
            p_dst.data[...] = p_src.data
        for p_dst, p_src in zip(enc2.rnn.params(), params.encoder.rnn.params()):
            p_dst.data[...] = p_src.data

        from trace_seq.ehr import VisitVector

        wide_vecs = [VisitVector(x=v.x, d=np.concatenate([v.d, np.zeros(3)])) for v in vecs]
        ep2 = ae.encode_sequence(wide_vecs, enc2).patient_embedding.data
        np.testing.assert_allclose(ep2, ep1, atol=1e-12)

    def test_collect_returns_attention_details(self):
        space = toy_space()
        params, _ = toy_autoencoder(space)
        vecs = toy_sequences(space, n_patients=1, n_visits=3, seed=12)[0][0]
        result = ae.encode_sequence(vecs, params.encoder, collect=True)
        assert len(result.visits) == 3
        for det in result.visits:
            np.testing.assert_allclose(det.attention.sum(axis=1), 1.0, atol=1e-9)
            assert det.z_tilde.shape == (5, space.dim - 12)  # downsized x d_z


class TestFullGradient:
    def test_autoencoder_loss_gradient_subset(self):
        """Spot-check the end-to-end gradient on a few parameter tensors."""
        space = toy_space()
        params, _ = toy_autoencoder(space)
        data = toy_sequences(space, n_patients=2, n_visits=2, seed=13)

        def loss_fn():
            total = None
            for vecs, _ in data:
                li, _ = ae.reconstruction_loss(vecs, params, space, mode="eval")
                total = li if total is None else nk.add(total, li)
            return nk.smul(total, 0.5)

        subset = [
            params.encoder.w_downsize,
            params.encoder.visit.w_q,
            params.encoder.rnn.w_ir,
            params.decoder.rnn.w_in,
            params.decoder.w_codes,
            params.decoder.b_num,
        ]
        report = nk.finite_diff_check(loss_fn, subset, h=1e-5)
        assert report.max_rel_error < 1e-4


class TestPretrain:
    def _tiny_run(self, seed=0, epochs=2):
        space = toy_space()
        params, _ = toy_autoencoder(space, seed=3, dropout=0.5)
        data = toy_sequences(space, n_patients=6, n_visits=2, seed=14)
        train = [s for s, _ in data[:4]]
        valid = [s for s, _ in data[4:]]
        result = ae.pretrain_autoencoder(
            train, valid, params, space, epochs=epochs, batch_size=4, seed=seed
        )
        return params, result

    def test_history_and_best_checkpoint(self):
        params, result = self._tiny_run()
        assert len(result.history) == 2
        valid_losses = [row["valid_loss"] for row in result.history]
        assert min(valid_losses) == valid_losses[result.best_epoch]

    def test_determinism(self):
        p1, r1 = self._tiny_run(seed=9)
        p2, r2 = self._tiny_run(seed=9)
        assert [row["train_loss"] for row in r1.history] == [
            row["train_loss"] for row in r2.history
        ]
        np.testing.assert_array_equal(
            p1.encoder.w_embed.data, p2.encoder.w_embed.data
        )

    def test_divergence_names_the_bad_tensor(self):
        from trace_seq.errors import DivergenceError

        space = toy_space()
        params, _ = toy_autoencoder(space, seed=4)
        params.encoder.w_downsize.data[0, 0] = np.nan
        data = toy_sequences(space, n_patients=2, n_visits=2, seed=15)
        with pytest.raises(DivergenceError, match="enc.downsize"):
            ae.pretrain_autoencoder(
                [s for s, _ in data], [], params, space, epochs=1, batch_size=2
            )

    def test_single_batch_overfit_cuts_loss_ninety_percent(self):
        space = toy_space()
        params, _ = toy_autoencoder(space, seed=1, dropout=0.0)
        plist = params.params()
        data = toy_sequences(space, n_patients=8, n_visits=2, seed=0)
        seqs = [s for s, _ in data]
        losses = []
        for _ in range(500):
            with nk.Tape() as tape:
                total = None
                for s in seqs:
                    li, _ = ae.reconstruction_loss(s, params, space, mode="train")
                    total = li if total is None else nk.add(total, li)
                total = nk.smul(total, 1 / len(seqs))
            nk.backward(tape, total)
            nk.adadelta_step(plist)
            losses.append(float(total.data))
        assert losses[-1] <= 0.1 * losses[0]
