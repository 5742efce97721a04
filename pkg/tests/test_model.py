import numpy as np
import pytest
import torch

from motionrecomp.errors import CorruptFileError, InvalidInputError, SchemaVersionError
from motionrecomp.imaging import ImageSequence
from motionrecomp.model import (
    PRESETS,
    CheckpointState,
    ConvLayer,
    ModelSpec,
    MotionEmbedder,
    embed_sequence,
    embed_sequence_single_image,
    load_checkpoint,
    miniature,
    model_arrays,
    optimizer_arrays,
    save_checkpoint,
    se2mnist_desk,
    se2mnist_reference,
)
from motionrecomp.recomposer import SamplerConfig, sample_tuple
from motionrecomp.training import TrainConfig, gather_bank, loss_from_embeddings


def tap_gaps(spec):
    """Layers whose dilated taps are farther apart than the field they sample."""
    field, jump, gaps = 1, 1, []
    for k, layer in enumerate(spec.conv_layers):
        if k and layer.dilation * jump > field:
            gaps.append(k)
        field += (layer.kernel - 1) * layer.dilation * jump
        jump *= layer.stride
    return gaps


def make_model(spec, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    return MotionEmbedder(spec).to(dtype).eval()


def test_preset_receptive_fields():
    assert se2mnist_reference().receptive_field() == 31
    assert se2mnist_reference().conv_layers[0].stride == 1
    assert se2mnist_desk().receptive_field() >= 32
    assert tap_gaps(se2mnist_desk()) == [] and tap_gaps(se2mnist_reference()) == []
    assert tap_gaps(ModelSpec("pair", (ConvLayer(4, 3, 1, 2), ConvLayer(4, 3, 2, 2)), input_size=(8, 8))) == [1]
    assert PRESETS["real-video-224"]().receptive_field() * 2 >= 224
    with pytest.raises(InvalidInputError):
        ModelSpec("pair", (ConvLayer(4),), input_size=(64, 64))
    with pytest.raises(InvalidInputError):
        ModelSpec("triple", (ConvLayer(4, 3, 8),), input_size=(8, 8))


def test_spec_dict_round_trip():
    spec = se2mnist_desk("single")
    assert ModelSpec.from_dict(spec.to_dict()) == spec


@pytest.mark.parametrize("mode", ["pair", "single"])
def test_embedding_shape(mode):
    model = make_model(se2mnist_desk(mode))
    frames = np.random.default_rng(0).random((5, 64, 64)).astype(np.float32)
    fn = embed_sequence if mode == "pair" else embed_sequence_single_image
    with torch.no_grad():
        assert fn(model, frames).shape == (256,)


def test_mode_mismatch_and_bad_shapes():
    pair = make_model(miniature())
    single = make_model(miniature("single"))
    frames = np.zeros((3, 8, 8), np.float32)
    with pytest.raises(InvalidInputError):
        embed_sequence_single_image(pair, frames)
    with pytest.raises(InvalidInputError):
        embed_sequence(single, frames)
    with pytest.raises(InvalidInputError):
        embed_sequence(pair, np.zeros((3, 9, 8), np.float32))
    with pytest.raises(InvalidInputError):
        embed_sequence(pair, np.zeros((1, 8, 8), np.float32))


def test_pair_mode_steps_are_frame_pairs():
    # swapping one middle frame changes the two steps that touch it
    model = make_model(miniature())
    rng = np.random.default_rng(1)
    a = rng.random((4, 8, 8)).astype(np.float32)
    b = a.copy()
    b[2] = rng.random((8, 8))
    with torch.no_grad():
        assert not torch.allclose(embed_sequence(model, a), embed_sequence(model, b))
        x = torch.from_numpy(a)
        steps = model.pair_features(x[:-1], x[1:])
        assert steps.shape == (3, 4)
        direct = model.compose(steps.unsqueeze(0), [3])[0]
    torch.testing.assert_close(direct, embed_sequence(model, a))


def test_batched_equals_one_at_a_time():
    model = make_model(miniature())
    rng = np.random.default_rng(2)
    bank = torch.from_numpy(rng.random((10, 8, 8)).astype(np.float32))
    seqs = [[0, 1, 2], [3, 4, 5, 6, 7], [2, 1], [0, 1, 2, 3]]
    with torch.no_grad():
        batched = model.embed_indexed(bank, seqs)
        alone = torch.stack([model.embed_frames(bank[s]) for s in seqs])
    torch.testing.assert_close(batched, alone, rtol=1e-5, atol=1e-6)


def test_eval_is_deterministic_and_batch_independent():
    model = make_model(se2mnist_desk())
    frames = np.random.default_rng(3).random((4, 64, 64)).astype(np.float32)
    with torch.no_grad():
        e1 = embed_sequence(model, frames)
        e2 = embed_sequence(model, frames)
        bank = torch.from_numpy(np.concatenate([frames, frames[::-1].copy()]))
        e3 = model.embed_indexed(bank, [[0, 1, 2, 3], [4, 5, 6, 7]])[0]
    assert torch.equal(e1, e2)
    torch.testing.assert_close(e1, e3, rtol=1e-5, atol=1e-6)


def test_embedding_invariant_to_content_is_not_trivial():
    model = make_model(miniature())
    rng = np.random.default_rng(4)
    outs = [embed_sequence(model, rng.random((3, 8, 8)).astype(np.float32)) for _ in range(3)]
    assert not torch.allclose(outs[0], outs[1])


# -- finite differences ----------------------------------------------------


def miniature_loss_setup():
    torch.manual_seed(7)
    model = MotionEmbedder(miniature()).double().train()
    rng = np.random.default_rng(8)
    seq = ImageSequence(rng.random((12, 8, 8)).astype(np.float32), "tiny")
    cfg = SamplerConfig()
    tuples = [sample_tuple(seq, cfg, rng) for _ in range(2)]
    bank, index_lists = gather_bank(tuples, torch.float64)
    train_cfg = TrainConfig()

    def loss_fn():
        emb = model.embed_indexed(bank, index_lists)
        return loss_from_embeddings(emb, train_cfg)[0]

    return model, loss_fn


def relu_masks(model, loss_fn):
    """On/off state of every ReLU unit during one loss evaluation, in call order."""
    masks = []
    hooks = [m.register_forward_hook(lambda _m, inp, _o: masks.append(inp[0] > 0))
             for m in model.modules() if isinstance(m, torch.nn.ReLU)]
    try:
        loss_fn()
    finally:
        for h in hooks:
            h.remove()
    return masks


def frozen_loss(model, loss_fn, masks):
    """Loss with every ReLU replaced by a fixed 0/1 gate.

    With the gates taken at the current parameters this function agrees with
    the real loss and its gradient there, and it is smooth, so finite
    differences converge without tripping over ReLU kinks.
    """
    calls = iter(masks)
    hooks = [m.register_forward_hook(lambda _m, inp, _o: inp[0] * next(calls))
             for m in model.modules() if isinstance(m, torch.nn.ReLU)]
    try:
        return loss_fn().item()
    finally:
        for h in hooks:
            h.remove()


def test_finite_difference_gradients():
    model, loss_fn = miniature_loss_setup()
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = torch.cat([p.grad.flatten() for p in params]).clone()
    masks = relu_masks(model, loss_fn)
    assert frozen_loss(model, loss_fn, masks) == loss.item()
    h = 1e-3
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = frozen_loss(model, loss_fn, masks)
                flat[i] = orig - h
                down = frozen_loss(model, loss_fn, masks)
                flat[i] = orig
                numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    assert analytic.norm() > 0
    assert (analytic - numeric).norm() / analytic.norm() < 1e-3


def test_input_gradients_match_finite_differences():
    torch.manual_seed(3)
    model = MotionEmbedder(miniature()).double().eval()
    frames = torch.rand(4, 8, 8, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda x: model.embed_frames(x).pow(2).sum(), (frames,),
                                    eps=1e-3, atol=1e-5, rtol=1e-3)


# -- checkpoints -----------------------------------------------------------


def trained_state(tmp_path):
    model = make_model(miniature())
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=1e-2)
    x = torch.rand(3, 8, 8)
    for _ in range(2):
        opt.zero_grad()
        model.embed_frames(x).sum().backward()
        opt.step()
    arrays, groups = optimizer_arrays(opt)
    return model, CheckpointState(model.spec, model_arrays(model), arrays, 4, b"\x01\x02rng",
                                  {"note": "x", "param_groups": groups})


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model, state = trained_state(tmp_path)
    path = tmp_path / "m.ckpt"
    save_checkpoint(state, path)
    back = load_checkpoint(path)
    assert back.spec == state.spec and back.epoch == 4 and back.rng_state == b"\x01\x02rng"
    assert back.meta["note"] == "x"
    assert list(back.parameters) == list(state.parameters)
    for k in state.parameters:
        assert back.parameters[k].tobytes() == state.parameters[k].tobytes()
    for k in state.optimizer:
        assert back.optimizer[k].tobytes() == state.optimizer[k].tobytes()
    rebuilt = back.build_model()
    model.eval()
    frames = np.random.default_rng(0).random((3, 8, 8)).astype(np.float32)
    with torch.no_grad():
        assert torch.equal(embed_sequence(model, frames), embed_sequence(rebuilt, frames))
    # saving the loaded state reproduces the file byte for byte
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()
    assert not (tmp_path / "m.ckpt.tmp").exists()


def test_checkpoint_corruption_is_detected(tmp_path):
    _, state = trained_state(tmp_path)
    path = tmp_path / "m.ckpt"
    save_checkpoint(state, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CorruptFileError):
        load_checkpoint(path)
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(CorruptFileError):
        load_checkpoint(path)
    path.write_bytes(b"GARBAGE!" + data[8:])
    with pytest.raises(CorruptFileError, match="magic"):
        load_checkpoint(path)
    path.write_bytes(data[:8] + (2).to_bytes(4, "little") + data[12:])
    with pytest.raises(SchemaVersionError):
        load_checkpoint(path)
    with pytest.raises(CorruptFileError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_checkpoint_shape_mismatch(tmp_path):
    _, state = trained_state(tmp_path)
    state.parameters["head.weight"] = np.zeros((3, 3), np.float32)
    with pytest.raises(CorruptFileError):
        state.build_model()
