"""WAV decoding, clip segmentation, magnitude STFT and the ``.prcn`` shard format."""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from prcnn.errors import ArgumentError, DatasetError, DimensionError, ParseError, UnsupportedFormatError

SAMPLE_RATE = 22050
CLIP_SAMPLES = 3 * SAMPLE_RATE  # 66150
CLIP_HOP = CLIP_SAMPLES // 2  # 33075
FRAME_LENGTH = 1024
FRAME_HOP = FRAME_LENGTH // 2
N_FRAMES = (CLIP_SAMPLES - FRAME_LENGTH) // FRAME_HOP + 1  # 128
N_BINS = FRAME_LENGTH // 2 + 1  # 513

SHARD_MAGIC = b"PRCN"
SHARD_VERSION = 1

_WAVE_FORMATS = {
    0x0001: "PCM",
    0x0003: "IEEE float",
    0x0006: "A-law",
    0x0007: "mu-law",
    0x0011: "IMA ADPCM",
    0x0055: "MPEG layer 3",
    0xFFFE: "extensible",
}


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    source_id: str = ""
    clip_index: int = 0


@dataclass
class Spectrogram:
    values: np.ndarray  # [128, 513]
    source_id: str = ""
    clip_index: int = 0
    label: int | None = None


@dataclass
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0 or not np.isfinite(self.std):
            raise DatasetError(f"degenerate normalisation statistics: std={self.std}")

    @classmethod
    def from_values(cls, values: np.ndarray) -> "NormStats":
        """Global mean/std over every value of a training set (two-pass, serial)."""
        values = np.asarray(values, dtype=np.float64)
        mean = float(values.mean())
        std = float(np.sqrt(np.mean((values - mean) ** 2)))
        return cls(mean, std)


# --- decoding ---------------------------------------------------------------


def decode_wav(data: bytes) -> tuple[np.ndarray, int, int]:
    """Decode a 16-bit PCM RIFF/WAVE file.

    Returns mono float samples in [-1, 1) (channels averaged), the sample rate
    and the original channel count.
    """
    if len(data) < 12:
        raise ParseError("file too short for a RIFF header", len(data))
    riff, _, wave = struct.unpack_from("<4sI4s", data, 0)
    if riff != b"RIFF" or wave != b"WAVE":
        raise ParseError("not a RIFF/WAVE container", 0)

    fmt = None
    pcm = None
    offset = 12
    while offset + 8 <= len(data):
        chunk_id, size = struct.unpack_from("<4sI", data, offset)
        body = offset + 8
        if body + size > len(data):
            if chunk_id == b"data" and fmt is not None:
                raise ParseError(f"data chunk declares {size} bytes but only {len(data) - body} remain", body)
            raise ParseError(f"chunk {chunk_id!r} runs past end of file", offset)
        if chunk_id == b"fmt ":
            if size < 16:
                raise ParseError("fmt chunk shorter than 16 bytes", body)
            fmt = struct.unpack_from("<HHIIHH", data, body)
            if fmt[0] == 0xFFFE and size >= 26:
                # WAVE_FORMAT_EXTENSIBLE: the real codec leads the subformat GUID
                fmt = (struct.unpack_from("<H", data, body + 24)[0],) + fmt[1:]
        elif chunk_id == b"data":
            pcm = data[body : body + size]
        offset = body + size + (size & 1)
    if fmt is None:
        raise ParseError("missing fmt chunk", offset)
    if pcm is None:
        raise ParseError("missing data chunk", offset)

    codec, channels, rate, _, block_align, bits = fmt
    codec_name = _WAVE_FORMATS.get(codec, f"format tag 0x{codec:04x}")
    if codec != 0x0001:
        raise UnsupportedFormatError(f"unsupported WAV encoding: {codec_name}; only 16-bit PCM is accepted")
    if bits != 16:
        raise UnsupportedFormatError(f"unsupported WAV encoding: {bits}-bit PCM; only 16-bit PCM is accepted")
    if channels < 1:
        raise ParseError("channel count is zero", 22)
    frame_bytes = 2 * channels
    usable = len(pcm) - len(pcm) % frame_bytes
    ints = np.frombuffer(pcm[:usable], dtype="<i2").astype(np.float64)
    samples = ints.reshape(-1, channels).mean(axis=1) / 32768.0
    return samples, rate, channels


def read_wav(path) -> tuple[np.ndarray, int, int]:
    return decode_wav(Path(path).read_bytes())


def encode_wav(samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> bytes:
    """16-bit mono PCM encoding of float samples (clipped to [-1, 1))."""
    import wave

    ints = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(ints.tobytes())
    return buf.getvalue()


# --- segmentation and STFT ----------------------------------------------------


def segment_clips(samples: np.ndarray, sample_rate: int, source_id: str = "") -> list[AudioClip]:
    """Cut 3 s clips with 50% overlap; a trailing partial window is dropped."""
    if sample_rate != SAMPLE_RATE:
        raise ArgumentError(
            f"sample rate {sample_rate} Hz is not supported; resample to {SAMPLE_RATE} Hz "
            "with an external tool (e.g. `sox in.wav -r 22050 out.wav`) first"
        )
    n = len(samples)
    if n < CLIP_SAMPLES:
        raise DatasetError(f"{source_id or 'input'}: {n} samples is shorter than one {CLIP_SAMPLES}-sample clip")
    count = (n - CLIP_SAMPLES) // CLIP_HOP + 1
    return [
        AudioClip(np.asarray(samples[k * CLIP_HOP : k * CLIP_HOP + CLIP_SAMPLES], dtype=np.float64),
                  sample_rate, source_id, k)
        for k in range(count)
    ]


def frame_signal(samples: np.ndarray) -> np.ndarray:
    n_frames = (len(samples) - FRAME_LENGTH) // FRAME_HOP + 1
    idx = np.arange(FRAME_LENGTH)[None, :] + FRAME_HOP * np.arange(n_frames)[:, None]
    return samples[idx]


def stft_magnitude(clip: AudioClip, window: str | None = None, label: int | None = None) -> Spectrogram:
    """Absolute values of the real DFT of 1024-sample frames, hop 512.

    No window is applied unless ``window="hann"``.
    """
    samples = np.asarray(clip.samples, dtype=np.float64)
    if samples.shape != (CLIP_SAMPLES,):
        raise DimensionError(f"clip must hold {CLIP_SAMPLES} samples, got {samples.shape}")
    frames = frame_signal(samples)
    if window == "hann":
        frames = frames * np.hanning(FRAME_LENGTH + 1)[:-1]
    elif window is not None:
        raise ArgumentError(f"unknown window {window!r}")
    mags = np.abs(np.fft.rfft(frames, axis=-1))
    return Spectrogram(mags, clip.source_id, clip.clip_index, label)


def wav_to_spectrograms(path, label: int | None = None, source_id: str | None = None) -> list[Spectrogram]:
    samples, rate, _ = read_wav(path)
    sid = source_id if source_id is not None else str(path)
    return [stft_magnitude(c, label=label) for c in segment_clips(samples, rate, sid)]


def normalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    if not stats.std > 0:
        raise DatasetError("degenerate normalisation statistics: std must be > 0")
    return (np.asarray(values, dtype=np.float64) - stats.mean) / stats.std


# --- shard files --------------------------------------------------------------


@dataclass
class Shard:
    """A set of labelled spectrograms, stored as ``[N, 128, 513]`` float64."""

    values: np.ndarray
    labels: np.ndarray
    source_ids: list[str]
    clip_indices: np.ndarray
    class_count: int
    label_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_spectrograms(cls, specs: list[Spectrogram], class_count: int, label_names=None) -> "Shard":
        if specs:
            values = np.stack([s.values for s in specs])
        else:
            values = np.zeros((0, N_FRAMES, N_BINS))
        return cls(
            values,
            np.array([s.label for s in specs], dtype=np.int64),
            [s.source_id for s in specs],
            np.array([s.clip_index for s in specs], dtype=np.int64),
            class_count,
            list(label_names or []),
        )

    def subset(self, idx) -> "Shard":
        idx = np.asarray(idx, dtype=int)
        return Shard(self.values[idx], self.labels[idx], [self.source_ids[i] for i in idx],
                     self.clip_indices[idx], self.class_count, list(self.label_names))


def shard_bytes(shard: Shard) -> bytes:
    out = io.BytesIO()
    out.write(SHARD_MAGIC)
    out.write(struct.pack("<III", SHARD_VERSION, len(shard), shard.class_count))
    for i in range(len(shard)):
        sid = shard.source_ids[i].encode("utf-8")
        out.write(struct.pack("<II", int(shard.labels[i]), len(sid)))
        out.write(sid)
        out.write(struct.pack("<I", int(shard.clip_indices[i])))
        out.write(np.ascontiguousarray(shard.values[i], dtype="<f4").tobytes())
    return out.getvalue()


def parse_shard(data: bytes) -> Shard:
    if data[:4] != SHARD_MAGIC:
        raise ParseError("not a .prcn shard (bad magic)", 0)
    if len(data) < 16:
        raise ParseError("truncated shard header", len(data))
    version, count, class_count = struct.unpack_from("<III", data, 4)
    if version != SHARD_VERSION:
        raise ParseError(f"unsupported shard version {version} (expected {SHARD_VERSION})", 4)
    block = N_FRAMES * N_BINS * 4
    offset = 16
    values = np.empty((count, N_FRAMES, N_BINS))
    labels, sids, clips = [], [], []
    for i in range(count):
        if offset + 8 > len(data):
            raise ParseError(f"record {i} header truncated", offset)
        label, n = struct.unpack_from("<II", data, offset)
        offset += 8
        if offset + n + 4 + block > len(data):
            raise ParseError(f"record {i} truncated", offset)
        sids.append(data[offset : offset + n].decode("utf-8"))
        offset += n
        (clip,) = struct.unpack_from("<I", data, offset)
        offset += 4
        values[i] = np.frombuffer(data, dtype="<f4", count=N_FRAMES * N_BINS, offset=offset).reshape(N_FRAMES, N_BINS)
        offset += block
        labels.append(label)
        clips.append(clip)
    if offset != len(data):
        raise ParseError("trailing bytes after last record", offset)
    return Shard(values, np.array(labels, dtype=np.int64), sids, np.array(clips, dtype=np.int64), class_count)


def atomic_write(path, data: bytes) -> None:
    """Write to a sibling temp file and rename, so failures leave no partial output."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def save_shard(shard: Shard, path) -> None:
    atomic_write(path, shard_bytes(shard))


def load_shard(path) -> Shard:
    return parse_shard(Path(path).read_bytes())
