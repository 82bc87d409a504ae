"""Genre-folder datasets, song-level stratified splits and a synthetic tone corpus."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from prcnn import audio_frontend as af
from prcnn.errors import ArgumentError, DatasetError
from prcnn.tensor_core import make_rng

AUDIO_SUFFIXES = (".wav",)


@dataclass
class DatasetManifest:
    label_names: list[str]
    entries: list[tuple[str, int]]
    split_seed: int | None = None
    split_fraction: float | None = None
    assignment: dict[str, str] = field(default_factory=dict)  # path -> "train" | "test"

    @property
    def class_count(self) -> int:
        return len(self.label_names)

    def to_text(self) -> str:
        lines = ["labels: " + ",".join(self.label_names)]
        for path, label in self.entries:
            lines.append(f"{path}\t{label}\t{self.assignment.get(path, '-')}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("labels:"):
            raise DatasetError("manifest must start with a 'labels:' header line")
        labels = [s for s in lines[0][len("labels:"):].strip().split(",") if s]
        entries, assignment = [], {}
        for n, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DatasetError(f"manifest line {n}: expected path<TAB>label<TAB>split")
            path, label, side = parts
            entries.append((path, int(label)))
            if side != "-":
                assignment[path] = side
        return cls(labels, entries, assignment=assignment)

    def save(self, path) -> None:
        af.atomic_write(path, self.to_text().encode("utf-8"))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def scan_dataset(root) -> DatasetManifest:
    """Index ``<root>/<genre>/*.wav``; labels are the sorted genre directory names."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    genres = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not genres:
        raise DatasetError(f"dataset root {root} has no genre subdirectories")
    entries = []
    for label, genre in enumerate(genres):
        files = sorted(p for p in (root / genre).iterdir() if p.is_file() and p.suffix.lower() in AUDIO_SUFFIXES)
        if not files:
            raise DatasetError(f"genre directory {root / genre} contains no audio files")
        entries.extend((str(f), label) for f in files)
    entries.sort()
    return DatasetManifest(genres, entries)


def split_songs(entries, fraction: float, seed) -> tuple[list, list]:
    """Stratified per-class shuffle of ``(song_id, label)`` pairs.

    Each class keeps ``round(fraction * n)`` songs for training, clamped so both
    sides receive at least one song.
    """
    if not 0 < fraction < 1:
        raise ArgumentError(f"split fraction must lie in (0, 1), got {fraction}")
    rng = make_rng(seed)
    by_class: dict[int, list] = {}
    for song, label in sorted(entries):
        by_class.setdefault(label, []).append(song)
    train, test = [], []
    for label in sorted(by_class):
        songs = by_class[label]
        if len(songs) < 2:
            raise DatasetError(f"class {label} has {len(songs)} song(s); at least 2 are needed to split")
        order = rng.permutation(len(songs))
        n_train = min(max(int(round(fraction * len(songs))), 1), len(songs) - 1)
        train.extend((songs[i], label) for i in sorted(order[:n_train]))
        test.extend((songs[i], label) for i in sorted(order[n_train:]))
    return train, test


def split(manifest: DatasetManifest, fraction: float, seed) -> tuple[list, list]:
    train, test = split_songs(manifest.entries, fraction, seed)
    manifest.split_fraction = fraction
    manifest.split_seed = seed if isinstance(seed, (int, np.integer)) else None
    manifest.assignment = {p: "train" for p, _ in train} | {p: "test" for p, _ in test}
    return train, test


def split_shard(shard: af.Shard, fraction: float, seed) -> tuple[af.Shard, af.Shard]:
    """Split a shard by source song, so overlapping clips never straddle the sides."""
    songs = {}
    for sid, label in zip(shard.source_ids, shard.labels):
        songs.setdefault(sid, int(label))
    train, _ = split_songs(list(songs.items()), fraction, seed)
    train_ids = {s for s, _ in train}
    mask = np.array([sid in train_ids for sid in shard.source_ids])
    return shard.subset(np.flatnonzero(mask)), shard.subset(np.flatnonzero(~mask))


def build_shard(entries, class_count: int, label_names=None, window=None) -> af.Shard:
    specs = []
    for path, label in entries:
        samples, rate, _ = af.read_wav(path)
        for clip in af.segment_clips(samples, rate, str(path)):
            specs.append(af.stft_magnitude(clip, window=window, label=label))
    return af.Shard.from_spectrograms(specs, class_count, label_names)


# --- synthetic tones ----------------------------------------------------------


def bin_frequency(k: int) -> float:
    return k * af.SAMPLE_RATE / af.FRAME_LENGTH


@dataclass
class SynthSpec:
    class_count: int = 10
    clips_per_class: int = 40
    tones_per_class: list[list[float]] | None = None
    noise_amplitude: float = 0.05
    seed: int = 0
    tones_each: int = 3
    min_bin: int = 8
    max_bin: int = 400

    def resolved_tones(self) -> list[list[float]]:
        """Tone sets per class; by default disjoint random bin triplets."""
        if self.tones_per_class is not None:
            tones = [list(map(float, t)) for t in self.tones_per_class]
        else:
            rng = make_rng(self.seed)
            pool = np.arange(self.min_bin, self.max_bin)
            need = self.class_count * self.tones_each
            if need > len(pool):
                raise ArgumentError(f"cannot draw {need} distinct bins from [{self.min_bin}, {self.max_bin})")
            bins = rng.choice(pool, size=need, replace=False).reshape(self.class_count, self.tones_each)
            tones = [[bin_frequency(int(k)) for k in sorted(row)] for row in bins]
        if len(tones) != self.class_count:
            raise ArgumentError(f"{len(tones)} tone sets for {self.class_count} classes")
        nyquist = af.SAMPLE_RATE / 2
        for c, freqs in enumerate(tones):
            if not freqs:
                raise ArgumentError(f"class {c} has no tones")
            for f in freqs:
                if not 0 < f < nyquist:
                    raise ArgumentError(f"class {c}: tone {f} Hz is not below the Nyquist limit {nyquist} Hz")
        if len({tuple(sorted(t)) for t in tones}) != len(tones):
            raise ArgumentError("class tone sets must be pairwise distinct")
        return tones


def synth_signal(freqs, n_samples: int, noise_amplitude: float, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n_samples) / af.SAMPLE_RATE
    phases = rng.uniform(0, 2 * np.pi, size=len(freqs))
    x = np.zeros(n_samples)
    for f, ph in zip(freqs, phases):
        x += np.sin(2 * np.pi * f * t + ph)
    if noise_amplitude > 0:
        x += rng.uniform(-noise_amplitude, noise_amplitude, size=n_samples)
    peak = np.max(np.abs(x))
    if peak > 0:
        x *= 0.9 / peak
    return x


def synth_generate(spec: SynthSpec) -> af.Shard:
    """Labelled spectrograms of noisy tone mixtures; each clip is its own song."""
    tones = spec.resolved_tones()
    rng = make_rng(np.random.SeedSequence([spec.seed, 1]).generate_state(1)[0])
    specs = []
    for c, freqs in enumerate(tones):
        for i in range(spec.clips_per_class):
            x = synth_signal(freqs, af.CLIP_SAMPLES, spec.noise_amplitude, rng)
            sid = f"synth/class{c:02d}/{i:04d}"
            for clip in af.segment_clips(x, af.SAMPLE_RATE, sid):
                specs.append(af.stft_magnitude(clip, label=c))
    names = [f"class{c:02d}" for c in range(spec.class_count)]
    return af.Shard.from_spectrograms(specs, spec.class_count, names)
