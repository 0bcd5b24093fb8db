import numpy as np
import pytest

from evsam.attention import AttentionConfig
from evsam.backbone import PRESETS
from evsam.nn.tensor import Tape, Tensor, mean, mul, sum_
from evsam.sam_head import (MaskDecoder, MaskPrediction, Predictor, PromptEncoder, PromptSet, SamModel,
                            mask_decode, select_best_mask)

TINY = PRESETS["tiny"]
SIZE = (64, 64)


def model(seed=0):
    return SamModel(TINY, AttentionConfig(scales=(3,)), seed=seed)


class TestPromptSet:
    def test_needs_a_prompt(self):
        with pytest.raises(ValueError):
            PromptSet()

    def test_bad_label(self):
        with pytest.raises(ValueError):
            PromptSet(points=[(1, 1, 2)])

    @pytest.mark.parametrize("box", [(5, 5, 5, 9), (5, 9, 8, 3)])
    def test_degenerate_box(self, box):
        with pytest.raises(ValueError):
            PromptSet(box=box)


class TestPromptEncoder:
    enc = PromptEncoder(16, seed=0)

    def test_same_point_same_embedding(self):
        out = self.enc.encode_points([(3, 4, 1), (3, 4, 1)], SIZE).data
        np.testing.assert_array_equal(out[0], out[1])

    def test_distinct_points_distinct_embeddings(self):
        out = self.enc.encode_points([(3, 4, 1), (3.5, 4, 1)], SIZE).data
        assert not np.array_equal(out[0], out[1])

    def test_opposite_corners_differ_in_every_frequency_pair(self):
        pe = self.enc.encode_coords(np.array([[0.0, 0.0], [64.0, 64.0]]), SIZE)
        # direct evaluation: angles 2*pi*(-g0 - g1) and 2*pi*(g0 + g1)
        g = self.enc.gaussian.astype(np.float64)
        ang = 2 * np.pi * (g[0] + g[1])
        np.testing.assert_allclose(pe[0], np.concatenate([np.sin(-ang), np.cos(-ang)]), atol=1e-5)
        np.testing.assert_allclose(pe[1], np.concatenate([np.sin(ang), np.cos(ang)]), atol=1e-5)
        half = pe.shape[1] // 2
        sin_differs = ~np.isclose(pe[0, :half], pe[1, :half])
        cos_differs = ~np.isclose(pe[0, half:], pe[1, half:])
        assert (sin_differs | cos_differs).all()

    def test_label_embedding_changes_output(self):
        fg = self.enc.encode_points([(10, 10, 1)], SIZE).data
        bg = self.enc.encode_points([(10, 10, 0)], SIZE).data
        np.testing.assert_allclose(fg - bg, (self.enc.point_embed[1].data - self.enc.point_embed[0].data)[None],
                                   rtol=1e-5, atol=1e-6)

    def test_out_of_bounds(self):
        with pytest.raises(ValueError):
            self.enc.encode_points([(65, 3, 1)], SIZE)
        with pytest.raises(ValueError):
            self.enc.encode_points([(-0.5, 3, 1)], SIZE)

    def test_full_image_box(self):
        box = self.enc.encode_box((0, 0, 64, 64), SIZE).data
        pe = self.enc.encode_coords(np.array([[0.0, 0.0], [64.0, 64.0]]), SIZE)
        np.testing.assert_allclose(box[0], pe[0] + self.enc.point_embed[2].data, rtol=1e-6)
        np.testing.assert_allclose(box[1], pe[1] + self.enc.point_embed[3].data, rtol=1e-6)

    def test_box_is_order_stable(self):
        a = self.enc.encode_box((3, 4, 20, 30), SIZE).data
        b = self.enc.encode_box((3, 4, 20, 30), SIZE).data
        assert a.tobytes() == b.tobytes()

    def test_degenerate_box(self):
        with pytest.raises(ValueError):
            self.enc.encode_box((3, 4, 3, 30), SIZE)

    def test_frequencies_follow_seed(self):
        assert np.array_equal(PromptEncoder(16, 5).gaussian, PromptEncoder(16, 5).gaussian)
        assert not np.array_equal(PromptEncoder(16, 5).gaussian, PromptEncoder(16, 6).gaussian)


class TestDecoder:
    def setup_method(self):
        self.m = model()
        self.emb = self.m.image_encoder(Tensor(np.random.default_rng(0).uniform(0, 1, (3, 64, 64))))

    @pytest.mark.parametrize("prompts", [
        PromptSet(points=[(10, 10, 1)]),
        PromptSet(box=(4, 4, 40, 30)),
        PromptSet(points=[(10, 10, 1), (50, 20, 0)], box=(4, 4, 40, 30)),
    ])
    def test_shape_contract(self, prompts):
        pred = self.m.decode(self.emb, prompts)
        assert pred.logits.shape == (3, 16, 16)
        assert pred.iou_scores.shape == (3,)
        assert ((pred.iou_scores.data >= 0) & (pred.iou_scores.data <= 1)).all()

    def test_zero_final_layers(self):
        dec = self.m.mask_decoder
        for mlp in (*dec.hyper, dec.iou_head):
            mlp.layers[-1].weight.data[:] = 0
            mlp.layers[-1].bias.data[:] = 0
        tokens = self.m.prompt_encoder.encode(PromptSet(points=[(5, 5, 1)]), SIZE)
        pred = mask_decode(self.emb, tokens, dec, self.m._image_pe)
        np.testing.assert_array_equal(pred.logits.data, 0)
        np.testing.assert_array_equal(pred.iou_scores.data, 0.5)

    def test_shape_mismatch(self):
        dec = self.m.mask_decoder
        with pytest.raises(ValueError):
            dec(self.emb, self.m._image_pe, Tensor(np.zeros((2, 8))))
        with pytest.raises(ValueError):
            dec(self.emb, self.m._image_pe[:10], Tensor(np.zeros((2, 16))))

    def test_point_order_does_not_matter(self):
        pts = [(10, 12, 1), (40, 30, 0), (22, 50, 1), (5, 60, 0)]
        a = self.m.decode(self.emb, PromptSet(points=pts))
        b = self.m.decode(self.emb, PromptSet(points=pts[::-1]))
        np.testing.assert_allclose(a.logits.data, b.logits.data, rtol=1e-4, atol=1e-5)
        np.testing.assert_allclose(a.iou_scores.data, b.iou_scores.data, rtol=1e-5)

    def test_gradients_reach_prompts_and_embedding(self):
        emb = Tensor(self.emb.data, requires_grad=True)
        tokens = Tensor(self.m.prompt_encoder.encode(PromptSet(points=[(9, 9, 1), (30, 40, 0)]), SIZE).data,
                        requires_grad=True)
        with Tape() as tape:
            pred = self.m.mask_decoder(emb, self.m._image_pe, tokens)
            loss = sum_(mul(pred.logits, pred.logits))
        tape.backward(loss)
        assert np.abs(emb.grad).max() > 0
        assert (np.abs(tokens.grad).max(axis=1) > 0).all()

    def test_end_to_end_reaches_stem(self):
        image = Tensor(np.random.default_rng(1).uniform(0, 1, (3, 64, 64)))
        with Tape() as tape:
            pred = self.m(image, PromptSet(box=(8, 8, 40, 40)))
            loss = mean(pred.logits)
        tape.backward(loss)
        assert np.abs(self.m.image_encoder.stem.weight.grad).max() > 0


class TestSelectBestMask:
    @staticmethod
    def pred(scores, logits=None):
        logits = np.zeros((3, 2, 2)) - 1 if logits is None else logits
        return MaskPrediction(Tensor(logits), Tensor(scores))

    def test_argmax(self):
        assert select_best_mask(self.pred([0.1, 0.9, 0.3]))[0] == 1

    def test_tie_goes_to_lowest_index(self):
        assert select_best_mask(self.pred([0.2, 0.7, 0.7]))[0] == 1

    def test_negative_logits_give_empty_mask(self):
        assert not select_best_mask(self.pred([0.5, 0.5, 0.5]))[1].any()

    def test_threshold_at_zero(self):
        logits = np.zeros((3, 1, 3))
        logits[0, 0] = [-0.1, 0.0, 0.1]
        assert select_best_mask(self.pred([1.0, 0, 0], logits))[1].tolist() == [[False, False, True]]


class TestPredictor:
    def test_requires_image(self):
        with pytest.raises(RuntimeError):
            Predictor(model()).predict(PromptSet(points=[(1, 1, 1)]))

    def test_full_resolution_mask(self):
        p = Predictor(model())
        p.set_image(np.random.default_rng(2).uniform(0, 1, (3, 64, 64)))
        mask = p.predict(PromptSet(points=[(30, 30, 1)]))
        assert mask.shape == (64, 64) and mask.dtype == bool
