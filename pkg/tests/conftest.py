import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x`` (float64)."""
    g = torch.zeros_like(x)
    flat = x.detach().view(-1)
    gflat = g.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = f().item()
        flat[i] = orig - eps
        fm = f().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def grad_rel_error(module_or_fn, inputs, params) -> float:
    """max over tensors of ||autograd - finite-difference|| / ||finite-difference||."""
    def loss():
        return module_or_fn(*inputs)

    out = loss()
    tensors = list(params)
    grads = torch.autograd.grad(out, tensors)
    worst = 0.0
    with torch.no_grad():
        for t, ga in zip(tensors, grads):
            gn = numeric_grad(loss, t)
            denom = max(gn.norm().item(), 1e-12)
            worst = max(worst, (ga - gn).norm().item() / denom)
    return worst


def tiny_codec_config(**kw):
    from dscodec.blocks import TransformerLayerSpec
    from dscodec.codec import CodecConfig
    from dscodec.quantize import VQConfig

    layer = TransformerLayerSpec(model_dim=16, n_heads=2, head_dim=8, ffn_hidden=32)
    base = dict(base_width=2, latent_dim=16, dilations=(1,), lstm_layers=1,
                quantizer=VQConfig(codebook_size=64, code_dim=4, input_dim=16), transformer_layers=(layer,))
    return CodecConfig(**(base | kw))


def tiny_settings(**kw):
    from dscodec.discriminators import MPDConfig, MSSTFTConfig
    from dscodec.trainer import TrainSettings

    base = dict(mpd=MPDConfig(base_channels=2), msstft=MSSTFTConfig(fft_sizes=(512, 256, 128), base_channels=2),
                codebook_warmup_batches=4, freeze_check_every=5)
    return TrainSettings(**(base | kw))


def tiny_data(crop_length: int = 1600, seed: int = 0):
    from dscodec.audio import CropDataset
    from dscodec.synth import synthetic_corpus

    return CropDataset.from_arrays(synthetic_corpus(0.2, seed=seed), crop_length=crop_length, seed=seed)


# -- acceptance reporting: one PASS/FAIL line per @pytest.mark.criterion test ---------

_criteria: list[tuple[str, str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed and not detail:
        detail = str(rep.longrepr).strip().splitlines()[-1][:160]
    _criteria.append((mark.args[0], "PASS" if rep.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in _criteria:
        terminalreporter.write_line(f"{status}  {name}" + (f"  ({detail})" if detail else ""))
