import json
import struct

import pytest
import torch

from localdiff.checkpoint import (MAGIC, checkpoint_hash, load_checkpoint,
                                  save_checkpoint)
from localdiff.errors import FileFormatError
from localdiff.model import Denoiser, ModelConfig


@pytest.fixture(scope="module")
def saved(tmp_path_factory):
    model = Denoiser(ModelConfig(), dtype=torch.float32)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p) * 0.01)
    model.train_steps = 7
    model.control_train_steps = 3
    path = tmp_path_factory.mktemp("ckpt") / "model.ldckpt"
    opt = {"enc1.weight/m": torch.randn(model.enc1.weight.shape)}
    save_checkpoint(path, model, extra_tensors=opt,
                    extra_meta={"note": "fixture"})
    return path, model, opt


class TestRoundTrip:
    def test_weights_bitwise(self, saved):
        path, model, _ = saved
        loaded, _, _ = load_checkpoint(path)
        for (na, pa), (nb, pb) in zip(model.named_parameters(),
                                      loaded.named_parameters()):
            assert na == nb
            assert torch.equal(pa.detach(), pb.detach())

    def test_optimizer_state_bitwise(self, saved):
        path, _, opt = saved
        _, opt_loaded, _ = load_checkpoint(path)
        assert set(opt_loaded) == set(opt)
        for name, t in opt.items():
            assert torch.equal(opt_loaded[name], t)

    def test_extra_meta_and_step_counters(self, saved):
        path, _, _ = saved
        loaded, _, extra = load_checkpoint(path)
        assert loaded.train_steps == 7
        assert loaded.control_train_steps == 3
        assert extra["note"] == "fixture"

    def test_save_deterministic(self, saved, tmp_path):
        path, model, opt = saved
        again = tmp_path / "again.ldckpt"
        save_checkpoint(again, model, extra_tensors=opt,
                        extra_meta={"note": "fixture"})
        assert checkpoint_hash(again) == checkpoint_hash(path)

    def test_dtype_override(self, saved):
        path, model, _ = saved
        loaded, _, _ = load_checkpoint(path, dtype=torch.float64)
        assert loaded.dtype == torch.float64
        for (_, pa), (_, pb) in zip(model.named_parameters(),
                                    loaded.named_parameters()):
            assert pb.dtype == torch.float64
            assert torch.equal(pa.detach().double(), pb.detach())


class TestHeader:
    def test_header_fields(self, saved):
        path, model, _ = saved
        raw = path.read_bytes()
        assert raw[:8] == MAGIC
        (hlen,) = struct.unpack("<I", raw[8:12])
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        assert header["format_version"] == 1
        assert header["dtype"] == "float32"
        assert header["arch_hash"] == model.config.arch_hash()
        assert header["vocab"] == list(model.config.vocab)
        names = {e["name"] for e in header["tensors"]}
        assert {n for n, _ in model.named_parameters()} <= names

    def test_offsets_contiguous(self, saved):
        path, _, _ = saved
        raw = path.read_bytes()
        (hlen,) = struct.unpack("<I", raw[8:12])
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        pos = 0
        for e in header["tensors"]:
            assert e["offset"] == pos
            pos += e["nbytes"]
        assert len(raw) == 12 + hlen + pos


class TestErrors:
    def test_bad_magic_offset_zero(self, tmp_path):
        p = tmp_path / "bad.ldckpt"
        p.write_bytes(b"NOTCKPT0" + bytes(16))
        with pytest.raises(FileFormatError) as e:
            load_checkpoint(p)
        assert e.value.offset == 0

    def test_truncated_header_length(self, tmp_path):
        p = tmp_path / "short.ldckpt"
        p.write_bytes(MAGIC + b"\x01")
        with pytest.raises(FileFormatError):
            load_checkpoint(p)

    def test_truncated_header_body(self, tmp_path):
        p = tmp_path / "trunc.ldckpt"
        p.write_bytes(MAGIC + struct.pack("<I", 1000) + b"{}")
        with pytest.raises(FileFormatError):
            load_checkpoint(p)

    def test_garbage_header_json(self, tmp_path):
        p = tmp_path / "junk.ldckpt"
        blob = b"not json at all"
        p.write_bytes(MAGIC + struct.pack("<I", len(blob)) + blob)
        with pytest.raises(FileFormatError) as e:
            load_checkpoint(p)
        assert e.value.offset == 12

    def test_arch_hash_mismatch(self, saved, tmp_path):
        path, _, _ = saved
        raw = path.read_bytes()
        (hlen,) = struct.unpack("<I", raw[8:12])
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        header["arch_hash"] = "0" * 64
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        p = tmp_path / "mismatch.ldckpt"
        p.write_bytes(MAGIC + struct.pack("<I", len(blob)) + blob
                      + raw[12 + hlen:])
        with pytest.raises(FileFormatError, match="hash"):
            load_checkpoint(p)

    def test_missing_tensor(self, saved, tmp_path):
        path, _, _ = saved
        raw = path.read_bytes()
        (hlen,) = struct.unpack("<I", raw[8:12])
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        header["tensors"] = [e for e in header["tensors"]
                             if e["name"] != "enc1.weight"]
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        p = tmp_path / "missing.ldckpt"
        p.write_bytes(MAGIC + struct.pack("<I", len(blob)) + blob
                      + raw[12 + hlen:])
        with pytest.raises(FileFormatError, match="enc1.weight"):
            load_checkpoint(p)

    def test_payload_out_of_bounds(self, saved, tmp_path):
        path, _, _ = saved
        raw = path.read_bytes()
        p = tmp_path / "clipped.ldckpt"
        p.write_bytes(raw[:-100])
        with pytest.raises(FileFormatError, match="out of bounds"):
            load_checkpoint(p)


class TestHash:
    def test_hash_changes_with_content(self, saved, tmp_path):
        path, model, _ = saved
        other = tmp_path / "other.ldckpt"
        with torch.no_grad():
            model.enc1.weight.add_(1.0)
        try:
            save_checkpoint(other, model)
        finally:
            with torch.no_grad():
                model.enc1.weight.sub_(1.0)
        assert checkpoint_hash(other) != checkpoint_hash(path)
