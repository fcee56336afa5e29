"""Vision-dynamics branch: shape and range contracts, asymmetry budget,
loss components, and the gradient structure of the composed VQ loss."""

import pytest
import torch

from fdcheck import check_grad
from xr1.codebook import SharedCodebook, quantize, straight_through
from xr1.vision import VisionBranch, validate_frames, vision_loss


@pytest.fixture(scope="module")
def branch():
    torch.manual_seed(0)
    return VisionBranch(image_size=32, base_channels=8, n_codes=4, code_dim=16)


def frames(batch, size, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(batch, 3, size, size, generator=g)


class TestContracts:
    def test_encode_shape(self, branch):
        z = branch.encode_dynamics(frames(3, 32), frames(3, 32, seed=1))
        assert z.shape == (3, 4, 16)

    def test_encode_deterministic(self, branch):
        a = branch.encode_dynamics(frames(2, 32), frames(2, 32, seed=1))
        b = branch.encode_dynamics(frames(2, 32), frames(2, 32, seed=1))
        assert torch.equal(a, b)

    def test_rejects_out_of_range_pixels(self, branch):
        bad = frames(1, 32)
        bad[0, 0, 0, 0] = 1.5
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            branch.encode_dynamics(bad, frames(1, 32))

    def test_rejects_wrong_size(self, branch):
        with pytest.raises(ValueError, match="expected"):
            branch.encode_dynamics(frames(1, 16), frames(1, 16))

    def test_decode_shape_and_clamp(self, branch):
        z_q = torch.randn(2, 4, 16) * 10  # extreme codes must not blow up pixels
        out = branch.decode_future(frames(2, 32), z_q)
        assert out.shape == (2, 3, 32, 32)
        assert out.min().item() >= 0.0 and out.max().item() <= 1.0

    def test_decode_zero_latent_valid(self, branch):
        out = branch.decode_future(frames(1, 32), torch.zeros(1, 4, 16))
        assert torch.isfinite(out).all()

    def test_decode_latent_mismatch(self, branch):
        with pytest.raises(ValueError, match="latent"):
            branch.decode_future(frames(1, 32), torch.zeros(1, 4, 8))

    def test_asymmetry_budget(self, branch):
        assert branch.encoder_params >= 3 * branch.decoder_params

    def test_asymmetry_violation_fails_at_build(self):
        with pytest.raises(ValueError, match="asymmetry"):
            VisionBranch(image_size=32, base_channels=8, n_codes=4, code_dim=16,
                         min_encoder_ratio=1e6)

    def test_validate_frames_helper(self):
        validate_frames(torch.zeros(2, 3, 8, 8), 8)
        with pytest.raises(ValueError, match="non-finite"):
            validate_frames(torch.full((1, 3, 8, 8), float("inf")), 8)


class TestVisionLoss:
    def test_zero_when_perfect(self):
        pred = frames(2, 8)
        z = torch.randn(2, 4, 8)
        parts = vision_loss(pred, pred.clone(), z, z.clone(), beta=0.25)
        assert parts["total"].item() == 0.0

    def test_uniform_offset_mean_l1(self):
        target = torch.full((2, 3, 8, 8), 0.4)
        pred = target + 0.1
        z = torch.randn(2, 2, 4)
        parts = vision_loss(pred, target, z, z.clone(), beta=0.25)
        assert parts["recon"].item() == pytest.approx(0.1)

    def test_components_sum_to_total(self):
        g = torch.Generator().manual_seed(3)
        pred = torch.rand(3, 3, 8, 8, generator=g)
        target = torch.rand(3, 3, 8, 8, generator=g)
        z = torch.randn(3, 2, 4, generator=g)
        z_q = torch.randn(3, 2, 4, generator=g)
        parts = vision_loss(pred, target, z, z_q, beta=0.25)
        total = parts["recon"] + parts["quant"] + parts["commit"]
        assert parts["total"].item() == pytest.approx(total.item(), rel=1e-12)

    def test_batch_order_invariance(self):
        g = torch.Generator().manual_seed(4)
        pred = torch.rand(4, 3, 8, 8, generator=g)
        target = torch.rand(4, 3, 8, 8, generator=g)
        z = torch.randn(4, 2, 4, generator=g)
        z_q = torch.randn(4, 2, 4, generator=g)
        a = vision_loss(pred, target, z, z_q, beta=0.25)["total"]
        perm = torch.tensor([2, 0, 3, 1])
        b = vision_loss(pred[perm], target[perm], z[perm], z_q[perm], beta=0.25)["total"]
        assert a.item() == pytest.approx(b.item(), rel=1e-6)


class TestGradientStructure:
    """FD check of the composed loss on a double-precision micro-network.

    Stop-gradient quantities are frozen at the base point inside the FD
    closures, matching the gradient contract the loss declares.
    """

    def setup_method(self):
        torch.manual_seed(1)
        self.enc = torch.nn.Linear(2, 2).double()  # 2-pixel frame -> one f=2 latent
        self.dec = torch.nn.Linear(4, 2).double()  # (frame, code) -> 2-pixel frame
        self.cb = SharedCodebook(4, 2).double()
        self.x = torch.rand(3, 2, dtype=torch.float64)
        self.target = torch.rand(3, 2, dtype=torch.float64)
        self.beta = 0.25

    def _forward(self):
        z = self.enc(self.x).unsqueeze(1)  # (B, 1, 2)
        idx, z_q = quantize(z, self.cb.entries)
        st = straight_through(z, z_q)
        pred = self.dec(torch.cat([self.x, st.squeeze(1)], dim=-1))
        parts = vision_loss(pred, self.target, z, z_q, self.beta)
        return parts["total"], z.detach(), z_q.detach(), idx

    def test_composed_gradients(self):
        total, z0, zq0, idx0 = self._forward()
        for p in list(self.enc.parameters()) + list(self.dec.parameters()) + [self.cb.entries]:
            p.grad = None
        total.backward()

        beta, x, target = self.beta, self.x, self.target
        enc, dec, cb = self.enc, self.dec, self.cb

        def frozen_loss_encoder_side():
            # straight-through carry: dec input = z + (zq0 - z0); sg(z) frozen in quant
            z = enc(x).unsqueeze(1)
            st_in = z + (zq0 - z0)
            pred = dec(torch.cat([x, st_in.squeeze(1)], dim=-1))
            recon = (pred - target).abs().mean()
            quant = beta * (z0 - zq0).pow(2).sum(dim=(-2, -1)).mean()
            commit = beta * (z - zq0).pow(2).sum(dim=(-2, -1)).mean()
            return recon + quant + commit

        def frozen_loss_codebook_side():
            z_q = cb.entries[idx0]
            quant = beta * (z0 - z_q).pow(2).sum(dim=(-2, -1)).mean()
            # recon sees the detached code delta, commit sees detached z_q: both frozen
            pred = dec(torch.cat([x, (z0 + (zq0 - z0)).squeeze(1)], dim=-1))
            recon = (pred - target).abs().mean()
            commit = beta * (z0 - zq0).pow(2).sum(dim=(-2, -1)).mean()
            return recon + quant + commit

        def full_loss_decoder_side():
            z = enc(x).unsqueeze(1)
            _, z_q = quantize(z, cb.entries)
            st = straight_through(z, z_q)
            pred = dec(torch.cat([x, st.squeeze(1)], dim=-1))
            return vision_loss(pred, target, z, z_q, beta)["total"]

        for p in enc.parameters():
            check_grad(frozen_loss_encoder_side, p, p.grad, k=8, tol=1e-4)
        for p in dec.parameters():
            check_grad(full_loss_decoder_side, p, p.grad, k=8, tol=1e-4)
        check_grad(frozen_loss_codebook_side, cb.entries, cb.entries.grad, k=8, tol=1e-4)
