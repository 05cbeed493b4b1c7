"""
Checkpoint container (".psgc").

Layout: magic "PSGC", u16 version, u32 header length, UTF-8 JSON header,
the named parameter tensors as little-endian float32 in header order, then a
CRC32 of all preceding bytes. The header records the model configuration,
training seed, normalization mode, reconstruction target and ICCL settings.
"""

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import torch

from src.errors import ChecksumMismatch, FormatViolation, InvalidConfig, IoFailure
from src.losses import IcclConfig
from src.model import ModelConfig, PsgMae

logger = logging.getLogger(__name__)

MAGIC = b"PSGC"
FORMAT_VERSION = 1
CHECKPOINT_NAME = "checkpoint.psgc"


@dataclass(eq=False)
class Checkpoint:
    model_config: ModelConfig
    tensors: Dict[str, np.ndarray]
    seed: int
    center_mode: str = "median"
    recon_target: str = "visible"
    iccl: IcclConfig = field(default_factory=IcclConfig)
    task: Optional[str] = None
    step: int = 0

    @classmethod
    def from_model(cls, model: PsgMae, seed: int, center_mode: str = "median",
                   recon_target: str = "visible", iccl: Optional[IcclConfig] = None,
                   task: Optional[str] = None, step: int = 0) -> "Checkpoint":
        tensors = {
            name: value.detach().cpu().to(torch.float32).numpy().copy()
            for name, value in model.state_dict().items()
        }
        return cls(
            model_config=model.cfg,
            tensors=tensors,
            seed=seed,
            center_mode=center_mode,
            recon_target=recon_target,
            iccl=iccl or IcclConfig(),
            task=task,
            step=step,
        )

    def build_model(self) -> PsgMae:
        """Instantiate the network and load the stored parameters."""
        model = PsgMae(self.model_config)
        state = {name: torch.from_numpy(np.array(value, dtype=np.float32)) for name, value in self.tensors.items()}
        try:
            model.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise FormatViolation(f"Checkpoint tensors do not fit the model configuration: {exc}") from exc
        model.eval()
        return model

    def header(self) -> Dict[str, Any]:
        return {
            "model_config": self.model_config.to_dict(),
            "seed": int(self.seed),
            "center_mode": self.center_mode,
            "recon_target": self.recon_target,
            "iccl": self.iccl.to_dict(),
            "task": self.task,
            "step": int(self.step),
            "tensors": [{"name": name, "shape": list(value.shape)} for name, value in self.tensors.items()],
        }

    def to_bytes(self) -> bytes:
        header_bytes = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), struct.pack("<I", len(header_bytes)), header_bytes]
        for value in self.tensors.values():
            parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        """
        Raises:
            FormatViolation: structural problems.
            ChecksumMismatch: CRC32 mismatch.
        """
        if len(data) < 10:
            raise FormatViolation("File too short for a checkpoint header", len(data))
        if data[:4] != MAGIC:
            raise FormatViolation("Bad magic bytes", 0)
        (version,) = struct.unpack_from("<H", data, 4)
        if version != FORMAT_VERSION:
            raise FormatViolation(f"Unsupported checkpoint version {version}", 4)
        (header_length,) = struct.unpack_from("<I", data, 6)
        header_end = 10 + header_length
        if header_end > len(data):
            raise FormatViolation("Truncated header", len(data))
        try:
            header = json.loads(data[10:header_end].decode("utf-8"))
            specs = [(str(t["name"]), tuple(int(d) for d in t["shape"])) for t in header["tensors"]]
            model_config = ModelConfig.from_dict(header["model_config"])
            iccl = IcclConfig.from_dict(header["iccl"])
            seed = int(header["seed"])
            step = int(header["step"])
            center_mode = str(header["center_mode"])
            recon_target = str(header["recon_target"])
            task = header["task"]
        except (UnicodeDecodeError, KeyError, TypeError, ValueError, InvalidConfig) as exc:
            raise FormatViolation(f"Malformed checkpoint header: {exc}", 10) from exc
        if any(d < 0 for _, shape in specs for d in shape):
            raise FormatViolation("Negative tensor dimension", 10)

        sizes = [int(np.prod(shape, dtype=np.int64)) for _, shape in specs]
        expected = header_end + 4 * sum(sizes) + 4
        if len(data) != expected:
            raise FormatViolation(
                f"Payload length mismatch: expected {expected} bytes, found {len(data)}", min(len(data), expected)
            )
        (stored_crc,) = struct.unpack_from("<I", data, expected - 4)
        if zlib.crc32(data[: expected - 4]) & 0xFFFFFFFF != stored_crc:
            raise ChecksumMismatch("CRC32 of checkpoint does not match")

        tensors = {}
        offset = header_end
        for (name, shape), size in zip(specs, sizes):
            value = np.frombuffer(data, dtype="<f4", count=size, offset=offset).reshape(shape)
            if not np.isfinite(value).all():
                raise FormatViolation(f"Non-finite value in tensor {name}", offset)
            tensors[name] = value.astype(np.float32)
            offset += 4 * size
        return cls(
            model_config=model_config,
            tensors=tensors,
            seed=seed,
            center_mode=center_mode,
            recon_target=recon_target,
            iccl=iccl,
            task=task,
            step=step,
        )

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(self.to_bytes())
        except OSError as exc:
            raise IoFailure(f"Cannot write checkpoint {path}: {exc}") from exc
        logger.info("Saved checkpoint %s (step %d)", path, self.step)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        """Load a checkpoint file, or ``checkpoint.psgc`` inside a run directory."""
        path = Path(path)
        if path.is_dir():
            path = path / CHECKPOINT_NAME
        if not path.exists():
            raise IoFailure(f"Checkpoint not found: {path}")
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise IoFailure(f"Cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(data)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()
