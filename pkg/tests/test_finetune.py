import pytest
import torch

from latentfill import codec
from latentfill.errors import InvalidInput, LatentFillError
from latentfill.finetune import (
    ExemplarBundle,
    FinetuneConfig,
    Rect,
    augment_exemplar,
    bg_loss,
    hole_bbox,
    masked_mse,
    ref_loss,
    run_finetune,
)

from conftest import grid_image, rect_mask


def latent_fixture(seed=0, size=64):
    img = grid_image(size, size, seed)
    mask = rect_mask(size, size, (size // 4, size // 4, size // 2, size // 2))
    x_in = codec.encode(img * mask.to(img.dtype))
    m_lat = codec.downsample_mask(mask, 8)
    return x_in, m_lat


class EchoBackend:
    """Stub that predicts a fixed tensor regardless of inputs."""

    def __init__(self, value, text_dim=8):
        self.value = value
        self.text_dim = text_dim

    def predict_noise(self, x_t, cond, t, masks=None):
        return self.value

    def encode_text(self, token_ids):
        return torch.zeros(len(token_ids), self.text_dim, dtype=torch.float64)


class TestMaskedMse:
    def test_empty_mask_gives_zero(self):
        pred = torch.randn(4, 3, 3, dtype=torch.float64)
        target = torch.randn(4, 3, 3, dtype=torch.float64)
        loss = masked_mse(pred, target, torch.zeros(3, 3, dtype=torch.float64))
        assert float(loss) == 0.0

    def test_full_mask_equals_plain_mse(self):
        g = torch.Generator().manual_seed(1)
        pred = torch.randn(4, 3, 3, generator=g, dtype=torch.float64)
        target = torch.randn(4, 3, 3, generator=g, dtype=torch.float64)
        loss = masked_mse(pred, target, torch.ones(3, 3, dtype=torch.float64))
        assert float(loss) == pytest.approx(
            float(((pred - target) ** 2).mean()), rel=1e-15
        )

    def test_perfect_prediction_is_zero(self):
        x = torch.randn(2, 4, 4, dtype=torch.float64)
        m = (torch.rand(4, 4) > 0.5).to(torch.float64)
        assert float(masked_mse(x, x.clone(), m)) == 0.0

    def test_gradient_zero_on_unknown_exact(self):
        g = torch.Generator().manual_seed(2)
        pred = torch.randn(3, 4, 4, generator=g, dtype=torch.float64, requires_grad=True)
        target = torch.randn(3, 4, 4, generator=g, dtype=torch.float64)
        mask = rect_mask(4, 4, (1, 1, 2, 2))
        masked_mse(pred, target, mask).backward()
        hole = mask == 0
        assert torch.equal(
            pred.grad[:, hole], torch.zeros_like(pred.grad[:, hole])
        )

    def test_gradient_matches_finite_differences_on_known(self):
        g = torch.Generator().manual_seed(3)
        pred = torch.randn(2, 3, 3, generator=g, dtype=torch.float64, requires_grad=True)
        target = torch.randn(2, 3, 3, generator=g, dtype=torch.float64)
        mask = rect_mask(3, 3, (0, 0, 2, 2))
        masked_mse(pred, target, mask).backward()
        h = 1e-6
        with torch.no_grad():
            for c in (0, 1):
                for y in range(3):
                    for x in range(3):
                        bumped = pred.detach().clone()
                        bumped[c, y, x] += h
                        up = float(masked_mse(bumped, target, mask))
                        bumped[c, y, x] -= 2 * h
                        down = float(masked_mse(bumped, target, mask))
                        fd = (up - down) / (2 * h)
                        got = float(pred.grad[c, y, x])
                        if mask[y, x] == 1:
                            assert got == pytest.approx(fd, rel=1e-4)
                        else:
                            assert got == 0.0

    def test_shape_checks(self):
        with pytest.raises(InvalidInput):
            masked_mse(torch.zeros(2, 3, 3), torch.zeros(2, 3, 4), torch.zeros(3, 3))
        with pytest.raises(InvalidInput):
            masked_mse(torch.zeros(2, 3, 3), torch.zeros(2, 3, 3), torch.zeros(4, 4))


class TestBgLoss:
    def test_perfect_predictor_gives_zero(self, sched):
        x_in, m_lat = latent_fixture()
        eps = torch.randn(x_in.shape, dtype=torch.float64)
        loss = bg_loss(EchoBackend(eps), x_in, m_lat, 400, eps, sched)
        assert float(loss) == 0.0

    def test_empty_mask_gives_zero(self, sched, tiny_params):
        x_in, _ = latent_fixture()
        eps = torch.randn(x_in.shape, dtype=torch.float64)
        zeros = torch.zeros(8, 8, dtype=torch.float64)
        assert float(bg_loss(tiny_params, x_in, zeros, 400, eps, sched)) == 0.0

    def test_full_mask_equals_unmasked_ddpm_loss(self, sched, tiny_params):
        from latentfill.schedule import add_noise
        from latentfill.tokenizer import null_sequence

        x_in, _ = latent_fixture()
        g = torch.Generator().manual_seed(5)
        eps = torch.randn(x_in.shape, generator=g, dtype=torch.float64)
        ones = torch.ones(8, 8, dtype=torch.float64)
        with torch.no_grad():
            loss = bg_loss(tiny_params, x_in, ones, 300, eps, sched)
            pred = tiny_params.predict_noise(
                add_noise(x_in, 300, eps, sched),
                tiny_params.encode_text(null_sequence()),
                300,
            )
        assert float(loss) == pytest.approx(float(((pred - eps) ** 2).mean()), rel=1e-14)


class TestAugmentExemplar:
    def setup_method(self):
        g = torch.Generator().manual_seed(0)
        self.x_ref = torch.randn(4, 8, 8, generator=g, dtype=torch.float64)
        self.bbox = Rect(2, 3, 8, 8)
        self.shape = (4, 16, 16)

    def test_full_scale_zero_offset_fills_bbox(self):
        g = torch.Generator().manual_seed(1)
        x_aug, m_valid, placed = augment_exemplar(
            self.x_ref, self.bbox, g, self.shape, scale=1.0, offset=(0, 0)
        )
        assert placed == Rect(2, 3, 8, 8)
        want_mask = torch.zeros(16, 16, dtype=torch.float64)
        want_mask[2:10, 3:11] = 1.0
        assert torch.equal(m_valid, want_mask)
        assert torch.equal(x_aug[:, 2:10, 3:11], self.x_ref)

    def test_half_scale_places_quarter_area(self):
        g = torch.Generator().manual_seed(2)
        _, m_valid, placed = augment_exemplar(
            self.x_ref, self.bbox, g, self.shape, scale=0.5, offset=(0, 0)
        )
        assert (placed.height, placed.width) == (4, 4)
        assert float(m_valid.sum()) == 16.0

    def test_mask_always_inside_bbox(self):
        g = torch.Generator().manual_seed(3)
        bbox_ind = torch.zeros(16, 16, dtype=torch.float64)
        bbox_ind[2:10, 3:11] = 1.0
        for _ in range(25):
            _, m_valid, _ = augment_exemplar(self.x_ref, self.bbox, g, self.shape)
            assert bool((m_valid <= bbox_ind).all())
            assert float(m_valid.sum()) >= 1.0

    def test_empty_bbox_rejected(self):
        g = torch.Generator().manual_seed(4)
        with pytest.raises(InvalidInput):
            augment_exemplar(self.x_ref, Rect(0, 0, 0, 0), g, self.shape)

    def test_deterministic_under_seed(self):
        a = augment_exemplar(
            self.x_ref, self.bbox, torch.Generator().manual_seed(9), self.shape
        )
        b = augment_exemplar(
            self.x_ref, self.bbox, torch.Generator().manual_seed(9), self.shape
        )
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1]) and a[2] == b[2]


class TestHoleBbox:
    def test_rect_hole(self):
        m = rect_mask(8, 8, (2, 3, 4, 2))
        assert hole_bbox(m) == Rect(2, 3, 4, 2)

    def test_no_hole(self):
        assert hole_bbox(torch.ones(4, 4, dtype=torch.float64)).empty


class TestRefLoss:
    def test_deterministic_given_pinned_inputs(self, sched, tiny_params):
        x_in, m_lat = latent_fixture()
        bundle = ExemplarBundle(
            x_ref=torch.randn(192, 4, 4, dtype=torch.float64),
            subject_token=500,
            hole_bbox=hole_bbox(m_lat),
        )
        eps = torch.randn(x_in.shape, dtype=torch.float64)
        with torch.no_grad():
            a = ref_loss(tiny_params, bundle, 250, eps, torch.Generator().manual_seed(1), sched)
            b = ref_loss(tiny_params, bundle, 250, eps, torch.Generator().manual_seed(1), sched)
        assert float(a) == float(b)

    def test_perfect_predictor_gives_zero(self, sched):
        x_in, m_lat = latent_fixture()
        eps = torch.randn(x_in.shape, dtype=torch.float64)
        bundle = ExemplarBundle(
            x_ref=torch.randn(192, 4, 4, dtype=torch.float64),
            subject_token=7,
            hole_bbox=hole_bbox(m_lat),
        )
        loss = ref_loss(EchoBackend(eps), bundle, 100, eps, torch.Generator().manual_seed(0), sched)
        assert float(loss) == 0.0


class TestRunFinetune:
    def test_zero_iters_is_identity(self, sched, tiny_params):
        x_in, m_lat = latent_fixture()
        before = {k: v.clone() for k, v in tiny_params.model.state_dict().items()}
        out = run_finetune(
            tiny_params, x_in, m_lat, None, FinetuneConfig(total_iters=0), sched
        )
        for k, v in out.model.state_dict().items():
            assert torch.equal(v, before[k])

    def test_same_seed_reproduces_parameters(self, sched, tiny_config):
        from latentfill.backbone import build_params

        x_in, m_lat = latent_fixture()
        cfg = FinetuneConfig(total_iters=4, learning_rate=1e-3, seed=123)
        a = run_finetune(build_params(tiny_config, 0), x_in, m_lat, None, cfg, sched)
        b = run_finetune(build_params(tiny_config, 0), x_in, m_lat, None, cfg, sched)
        for pa, pb in zip(a.model.state_dict().values(), b.model.state_dict().values()):
            assert torch.equal(pa, pb)

    def test_loss_trends_down(self, sched, tiny_config):
        from latentfill.backbone import build_params

        x_in, m_lat = latent_fixture()
        losses = []
        run_finetune(
            build_params(tiny_config, 0),
            x_in,
            m_lat,
            None,
            FinetuneConfig(total_iters=60, learning_rate=1e-3, seed=0),
            sched,
            on_progress=lambda r: losses.append(r["bg_loss"]),
        )
        assert sum(losses[-10:]) / 10 < sum(losses[:10]) / 10

    def test_telemetry_contains_both_components(self, sched, tiny_config):
        from latentfill.backbone import build_params

        x_in, m_lat = latent_fixture()
        bundle = ExemplarBundle(
            x_ref=torch.randn(192, 4, 4, dtype=torch.float64),
            subject_token=42,
            hole_bbox=hole_bbox(m_lat),
        )
        records = []
        run_finetune(
            build_params(tiny_config, 0),
            x_in,
            m_lat,
            bundle,
            FinetuneConfig(total_iters=3, learning_rate=1e-3, seed=0),
            sched,
            on_progress=records.append,
        )
        assert len(records) == 3
        assert all(r["ref_loss"] > 0 for r in records)
        assert all(r["bg_loss"] > 0 for r in records)
        assert records[0]["iteration"] == 0

    def test_iteration_counter_accumulates(self, sched, tiny_params):
        x_in, m_lat = latent_fixture()
        start = tiny_params.iterations
        run_finetune(
            tiny_params, x_in, m_lat, None,
            FinetuneConfig(total_iters=2, learning_rate=1e-4), sched,
        )
        assert tiny_params.iterations == start + 2

    def test_non_finite_loss_aborts(self, sched, tiny_config):
        from latentfill.backbone import build_params

        x_in, m_lat = latent_fixture()
        params = build_params(tiny_config, 0)
        with torch.no_grad():
            params.model.conv_in.weight[0, 0, 0, 0] = float("nan")
        with pytest.raises(LatentFillError, match="non-finite"):
            run_finetune(
                params, x_in, m_lat, None,
                FinetuneConfig(total_iters=2, learning_rate=1e-4), sched,
            )

    def test_config_validation(self):
        with pytest.raises(InvalidInput):
            FinetuneConfig(total_iters=-1)
        with pytest.raises(InvalidInput):
            FinetuneConfig(learning_rate=0.0)

    def test_layer_filter_freezes_everything_else(self, sched, tiny_config):
        from latentfill.backbone import build_params

        x_in, m_lat = latent_fixture()
        params = build_params(tiny_config, 0)
        before = {k: v.clone() for k, v in params.model.state_dict().items()}
        run_finetune(
            params, x_in, m_lat, None,
            FinetuneConfig(total_iters=3, learning_rate=1e-3, train_layers=("conv_out",)),
            sched,
        )
        for name, value in params.model.state_dict().items():
            if name.startswith("conv_out"):
                assert not torch.equal(value, before[name])
            else:
                assert torch.equal(value, before[name])

    def test_layer_filter_matching_nothing_rejected(self, sched, tiny_params):
        x_in, m_lat = latent_fixture()
        with pytest.raises(InvalidInput):
            run_finetune(
                tiny_params, x_in, m_lat, None,
                FinetuneConfig(total_iters=1, train_layers=("nonexistent.",)), sched,
            )
