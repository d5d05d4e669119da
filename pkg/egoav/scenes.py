"""
scenes module

Desk-scale stand-in for egocentric conversation data. Speakers are colored
disks moving over a plain background; each active speaker's source is
binauralized from its on-screen azimuth (left edge -90 deg, right edge
+90 deg) with constant-power panning and a far-ear delay of up to 0.45 ms.
Rendered scenes are sliced into 1 s clips, written losslessly, and indexed
by a JSONL manifest with scene-disjoint splits.

The same manifest format serves real datasets whose media already conform
(5 fps frame archives, 16 kHz stereo WAV).
"""
import json
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import soundfile as sf
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy import signal

from .common import derive_rng
from .config import CorpusConfig
from .errors import DataError
from .logging import get_logger
from .tokenizer import RawClip


logger = get_logger(__name__)

MAX_ITD = 0.45e-3
SOURCE_BAND = (200.0, 4000.0)
SOURCE_LEVEL = 0.25
SPLITS = ("train", "val", "test")
SPLIT_KEY = 7919


class SpeakerSpec(BaseModel):
    """
    One speaker sprite and its source.

    ``positions`` are per-frame normalized (x, y) world coordinates and
    ``activity`` the per-frame speech flag.
    """
    id: str
    color: Tuple[float, float, float] = (0.9, 0.3, 0.3)
    radius: int = Field(20, ge=1)
    positions: List[Tuple[float, float]]
    activity: List[bool]
    source: Literal["noise", "tone"] = "noise"
    tone_hz: float = Field(440.0, gt=0)
    modulation_hz: float = Field(4.0, ge=0)
    seed: int = 0

    @field_validator("positions")
    @classmethod
    def check_positions(cls, values: List[Tuple[float, float]]) -> List[Tuple[float, float]]:
        for x, y in values:
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise ValueError(f"position ({x}, {y}) outside the unit square")
        return values

    @model_validator(mode="after")
    def check_lengths(self) -> "SpeakerSpec":
        if len(self.positions) != len(self.activity):
            raise ValueError("positions and activity must have one entry per frame")
        return self


class SceneSpec(BaseModel):
    height: int = 240
    width: int = 352
    fps: int = 5
    seconds: int = Field(5, ge=1)
    sample_rate: int = 16000
    speakers: List[SpeakerSpec]
    ambient_level: float = Field(0.01, ge=0)
    pan: Optional[List[float]] = Field(None, description="Horizontal camera offset per frame")
    highlight_active: bool = False
    background: Tuple[float, float, float] = (0.2, 0.2, 0.25)
    seed: int = 0

    @model_validator(mode="after")
    def check_scene(self) -> "SceneSpec":
        if not self.speakers:
            raise ValueError("a scene needs at least one speaker")
        if self.width % 16:
            raise ValueError(f"width={self.width} must be divisible by 16")
        for speaker in self.speakers:
            if len(speaker.positions) != self.num_frames:
                raise ValueError(f"speaker {speaker.id} has {len(speaker.positions)} frames, scene {self.num_frames}")
        if self.pan is not None and len(self.pan) != self.num_frames:
            raise ValueError("pan must have one entry per frame")
        return self

    @property
    def num_frames(self) -> int:
        return self.fps * self.seconds

    @property
    def num_samples(self) -> int:
        return self.sample_rate * self.seconds


def mirror_spec(spec: SceneSpec) -> SceneSpec:
    """
    The left-right mirror image of a scene.
    """
    speakers = [
        s.model_copy(update={"positions": [(1.0 - x, y) for x, y in s.positions]}) for s in spec.speakers
    ]
    pan = [-p for p in spec.pan] if spec.pan is not None else None
    return spec.model_copy(update={"speakers": speakers, "pan": pan})


def azimuth_of(x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """
    Normalized screen x (0 left, 1 right) to azimuth in degrees.
    """
    return (np.clip(x, 0.0, 1.0) - 0.5) * 180.0


def binauralize(
    mono: np.ndarray,
    azimuth: Union[float, np.ndarray],
    sample_rate: int = 16000,
    max_itd: float = MAX_ITD,
) -> np.ndarray:
    """
    Place a mono source at a (possibly time-varying) azimuth.

    Gains follow the constant-power law ``g_L = cos(phi)``, ``g_R = sin(phi)``
    with ``phi = (azimuth + 90) / 180 * pi / 2``; the ear away from the source
    is delayed by ``|azimuth| / 90 * max_itd`` with linear fractional-delay
    interpolation.

    :param mono: N samples
    :param azimuth: Degrees in [-90, 90], scalar or one value per sample
    :return: 2 x N float64
    """
    mono = np.asarray(mono, dtype=np.float64)
    n = np.arange(mono.shape[0], dtype=np.float64)
    az = np.broadcast_to(np.asarray(azimuth, dtype=np.float64), mono.shape)

    # sin(phi) written as cos(pi/2 - phi) so that mirrored azimuths swap gains exactly
    gain_left = np.cos((az + 90.0) / 180.0 * (np.pi / 2))
    gain_right = np.cos((90.0 - az) / 180.0 * (np.pi / 2))
    delay = max_itd * sample_rate / 90.0
    delay_left = np.maximum(az, 0.0) * delay
    delay_right = np.maximum(-az, 0.0) * delay

    left = np.interp(n - delay_left, n, mono, left=0.0)
    right = np.interp(n - delay_right, n, mono, left=0.0)
    return np.stack([gain_left * left, gain_right * right])


def activity_gate(activity: Sequence[bool], fps: int, num_samples: int, sample_rate: int) -> np.ndarray:
    frame = (np.arange(num_samples) * fps) // sample_rate
    return np.asarray(activity, dtype=np.float64)[np.minimum(frame, len(activity) - 1)]


def source_signal(speaker: SpeakerSpec, num_samples: int, sample_rate: int) -> np.ndarray:
    """
    Speech-like mono source: band-limited noise or a tone under a slow
    amplitude envelope. Not gated.
    """
    rng = derive_rng(speaker.seed)
    t = np.arange(num_samples) / sample_rate
    if speaker.source == "noise":
        sos = signal.butter(4, SOURCE_BAND, btype="bandpass", fs=sample_rate, output="sos")
        carrier = signal.sosfilt(sos, rng.standard_normal(num_samples))
        carrier /= np.sqrt(np.mean(carrier**2)) + 1e-12
    else:
        carrier = np.sqrt(2.0) * np.sin(2 * np.pi * speaker.tone_hz * t + rng.uniform(0, 2 * np.pi))
    envelope = 0.6 + 0.4 * np.sin(2 * np.pi * speaker.modulation_hz * t + rng.uniform(0, 2 * np.pi))
    return SOURCE_LEVEL * envelope * carrier


def screen_positions(spec: SceneSpec, speaker: SpeakerSpec) -> np.ndarray:
    """
    Per-frame camera-relative (x, y), pan subtracted.
    """
    positions = np.asarray(speaker.positions, dtype=np.float64)
    if spec.pan is not None:
        positions = positions - np.stack([np.asarray(spec.pan), np.zeros(spec.num_frames)], axis=1)
    return positions


def sample_azimuth(spec: SceneSpec, xs: np.ndarray) -> np.ndarray:
    """
    Per-sample azimuth, linear between frame centers.
    """
    frame_times = (np.arange(spec.num_frames) + 0.5) / spec.fps
    sample_times = np.arange(spec.num_samples) / spec.sample_rate
    return azimuth_of(np.interp(sample_times, frame_times, xs))


def bbox_of(x: float, y: float, radius: int, height: int, width: int) -> List[float]:
    x0 = max(0.0, x - radius / width)
    y0 = max(0.0, y - radius / height)
    x1 = min(1.0, x + radius / width)
    y1 = min(1.0, y + radius / height)
    return [x0, y0, max(0.0, x1 - x0), max(0.0, y1 - y0)]


@dataclass
class RenderedScene:
    frames: np.ndarray  # T x H x W x 3, multiples of 1/255
    waveform: np.ndarray  # 2 x N float32
    labels: Dict
    stems: Dict[str, np.ndarray]  # speaker id -> 2 x N float32
    ambient: np.ndarray  # 2 x N float32


def quantize(frames: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frames, 0.0, 1.0) * 255).astype(np.uint8).astype(np.float32) / 255


def render_scene(spec: SceneSpec) -> RenderedScene:
    """
    Render frames, binaural audio and labels of a scene.

    :raises DataError: If two speakers share an id
    """
    ids = [s.id for s in spec.speakers]
    if len(set(ids)) != len(ids):
        raise DataError(f"overlapping sprite ids: {ids}")

    H, W, T, N = spec.height, spec.width, spec.num_frames, spec.num_samples
    frames = np.empty((T, H, W, 3), dtype=np.float64)
    frames[:] = np.asarray(spec.background)
    rows = (np.arange(H) + 0.5)[:, None]
    cols = (np.arange(W) + 0.5)[None, :]

    stems: Dict[str, np.ndarray] = {}
    label_frames: List[Dict] = [{"speakers": []} for _ in range(T)]
    for speaker in spec.speakers:
        screen = screen_positions(spec, speaker)
        color = np.asarray(speaker.color)
        for t, (x, y) in enumerate(screen):
            active = bool(speaker.activity[t])
            disk = (cols - x * W) ** 2 + (rows - y * H) ** 2 <= speaker.radius**2
            shade = 0.5 * (color + 1.0) if spec.highlight_active and active else color
            frames[t][disk] = shade
            label_frames[t]["speakers"].append(
                {"id": speaker.id, "bbox": bbox_of(x, y, speaker.radius, H, W), "active": active}
            )

        gate = activity_gate(speaker.activity, spec.fps, N, spec.sample_rate)
        mono = source_signal(speaker, N, spec.sample_rate) * gate
        stems[speaker.id] = binauralize(mono, sample_azimuth(spec, screen[:, 0]), spec.sample_rate)

    ambient_mono = spec.ambient_level * derive_rng(spec.seed, 1).standard_normal(N)
    ambient = np.stack([ambient_mono, ambient_mono])
    mixture = ambient + sum(stems.values())

    peak = float(np.max(np.abs(mixture)))
    gain = 1.0 / peak if peak > 1.0 else 1.0
    return RenderedScene(
        frames=quantize(frames),
        waveform=(mixture * gain).astype(np.float32),
        labels={"frames": label_frames},
        stems={k: (v * gain).astype(np.float32) for k, v in stems.items()},
        ambient=(ambient * gain).astype(np.float32),
    )


PALETTE = [
    (0.95, 0.35, 0.3),
    (0.3, 0.8, 0.4),
    (0.35, 0.5, 0.95),
    (0.95, 0.85, 0.3),
    (0.8, 0.4, 0.9),
    (0.3, 0.85, 0.9),
]


def _turns(rng: np.random.Generator, num_frames: int, fps: int) -> List[bool]:
    """
    Alternating speech/silence runs of 0.4 to 2 s.
    """
    flags: List[bool] = []
    speaking = bool(rng.random() < 0.5)
    while len(flags) < num_frames:
        flags.extend([speaking] * int(rng.integers(2, 2 * fps + 1)))
        speaking = not speaking
    return flags[:num_frames]


def sample_scene(config: CorpusConfig, scene_index: int) -> SceneSpec:
    """
    Draw a random scene from the corpus distribution.
    """
    rng = derive_rng(config.seed, scene_index)
    T = config.fps * config.scene_seconds
    count = int(rng.integers(config.min_speakers, config.max_speakers + 1))
    r_x = config.sprite_radius / config.width
    r_y = config.sprite_radius / config.height

    # one horizontal lane per speaker keeps sprites apart
    lanes = (np.arange(count) + rng.random(count)) / count
    lanes = rng.permutation(r_x + lanes * (1.0 - 2 * r_x))
    speakers = []
    for i in range(count):
        x0 = float(lanes[i])
        drift = rng.uniform(-0.05, 0.05)
        xs = np.clip(x0 + drift * np.linspace(0, 1, T), r_x, 1 - r_x)
        y = rng.uniform(0.3, 0.7)
        ys = np.clip(y + 0.02 * np.sin(np.linspace(0, np.pi, T) + rng.uniform(0, np.pi)), r_y, 1 - r_y)
        speakers.append(
            SpeakerSpec(
                id=f"spk{i}",
                color=PALETTE[i % len(PALETTE)],
                radius=config.sprite_radius,
                positions=[(float(x), float(y)) for x, y in zip(xs, ys)],
                activity=_turns(rng, T, config.fps) if count > 1 else [True] * T,
                source="noise" if rng.random() < 0.7 else "tone",
                tone_hz=float(rng.uniform(150, 600)),
                modulation_hz=float(rng.uniform(2, 6)),
                seed=int(rng.integers(2**31)),
            )
        )

    pan = None
    if config.max_pan > 0:
        phase = rng.uniform(0, 2 * np.pi)
        pan = [float(config.max_pan * np.sin(phase + 2 * np.pi * t / T)) for t in range(T)]
        # keep every sprite on screen
        pan = [float(np.clip(p, -r_x, r_x)) for p in pan]

    return SceneSpec(
        height=config.height,
        width=config.width,
        fps=config.fps,
        seconds=config.scene_seconds,
        sample_rate=config.sample_rate,
        speakers=speakers,
        ambient_level=config.ambient_level,
        pan=pan,
        highlight_active=config.highlight_active,
        seed=int(rng.integers(2**31)),
    )


class ManifestRecord(BaseModel):
    clip_id: str
    video_path: str
    audio_path: str
    labels_path: Optional[str] = None
    split: str = "train"
    dataset: str = "synthetic"
    scene_id: Optional[str] = None
    start_time: float = 0.0


def assign_splits(n_scenes: int, fractions: Sequence[float], seed: int) -> List[str]:
    """
    Split name per scene index; whole scenes go to one split.
    """
    order = derive_rng(seed, SPLIT_KEY).permutation(n_scenes)
    n_train = int(round(fractions[0] * n_scenes))
    n_val = int(round(fractions[1] * n_scenes))
    names = ["train"] * n_train + ["val"] * n_val
    names += ["test"] * (n_scenes - len(names))
    splits = [""] * n_scenes
    for rank, scene in enumerate(order):
        splits[scene] = names[rank]
    return splits


def write_wav(path: Path, waveform: np.ndarray, sample_rate: int) -> None:
    sf.write(path, np.asarray(waveform, dtype=np.float32).T, sample_rate, subtype="FLOAT")


def _write_scene(args) -> List[Dict]:
    config, scene_index, split, root = args
    root = Path(root)
    spec = sample_scene(config, scene_index)
    scene = render_scene(spec)
    scene_id = f"scene{scene_index:04d}"
    media = root / "media" / scene_id
    media.mkdir(parents=True, exist_ok=True)

    records = []
    sr, fps = spec.sample_rate, spec.fps
    for k in range(spec.seconds):
        clip_id = f"{scene_id}-{k:02d}"
        frames = scene.frames[k * fps : (k + 1) * fps]
        samples = slice(k * sr, (k + 1) * sr)

        np.save(media / f"{clip_id}.npy", np.round(frames * 255).astype(np.uint8))
        write_wav(media / f"{clip_id}.wav", scene.waveform[:, samples], sr)
        stems = {}
        for speaker_id, stem in scene.stems.items():
            stem_path = media / f"{clip_id}.{speaker_id}.wav"
            write_wav(stem_path, stem[:, samples], sr)
            stems[speaker_id] = stem_path.relative_to(root).as_posix()
        labels = {"frames": scene.labels["frames"][k * fps : (k + 1) * fps], "stems": stems}
        (media / f"{clip_id}.json").write_text(json.dumps(labels, indent=1), encoding="utf-8")

        records.append(
            ManifestRecord(
                clip_id=clip_id,
                video_path=(media / f"{clip_id}.npy").relative_to(root).as_posix(),
                audio_path=(media / f"{clip_id}.wav").relative_to(root).as_posix(),
                labels_path=(media / f"{clip_id}.json").relative_to(root).as_posix(),
                split=split,
                scene_id=scene_id,
                start_time=float(k),
            ).model_dump()
        )
    return records


def _scene_dirs(out_dir: Path) -> List[Path]:
    media = out_dir / "media"
    return [p for p in media.iterdir() if p.is_dir()] if media.is_dir() else []


def generate_corpus(config: CorpusConfig, out_dir: Union[str, Path], workers: int = 0) -> Path:
    """
    Render ``config.n_scenes`` scenes into 1 s clips under ``out_dir``.

    Media go to ``out_dir/media/<scene>/``; the manifest ``out_dir/manifest.jsonl``
    lists clips in scene order with paths relative to ``out_dir``. On a disk
    error the scene directories this call created are removed; media of an
    earlier run in the same directory are left in place.

    :param workers: Rendering processes, 0 or 1 renders in-process
    :return: The manifest path
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = assign_splits(config.n_scenes, config.splits, config.seed)
    jobs = [(config, i, splits[i], str(out_dir)) for i in range(config.n_scenes)]
    manifest = out_dir / "manifest.jsonl"
    tmp = out_dir / "manifest.jsonl.tmp"
    existing = set(_scene_dirs(out_dir))

    logger.info(f"Rendering {config.n_scenes} scenes of {config.scene_seconds} s into {out_dir}")
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                per_scene = list(pool.map(_write_scene, jobs))
        else:
            per_scene = [_write_scene(job) for job in jobs]

        with open(tmp, "w", encoding="utf-8") as f:
            for records in per_scene:
                for record in records:
                    f.write(json.dumps(record, sort_keys=True) + "\n")
        os.replace(tmp, manifest)
    except OSError:
        created = sorted(set(_scene_dirs(out_dir)) - existing)
        logger.error(f"Corpus generation failed, removing {len(created)} new scene directories under {out_dir}")
        for path in created:
            shutil.rmtree(path, ignore_errors=True)
        tmp.unlink(missing_ok=True)
        raise

    logger.info(f"Wrote {sum(len(r) for r in per_scene)} clips to {manifest}")
    return manifest


def read_manifest(path: Union[str, Path], split: Optional[str] = None) -> List[ManifestRecord]:
    with open(path, encoding="utf-8") as f:
        records = [ManifestRecord.model_validate_json(line) for line in f if line.strip()]
    return [r for r in records if split is None or r.split == split]


def _resolve(root: Path, path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else root / p


def load_clip(record: ManifestRecord, root: Union[str, Path] = ".") -> Tuple[RawClip, Optional[Dict]]:
    """
    Load the media and labels of one manifest record.

    :param root: Directory the record's relative paths start from
    :raises DataError: On a channel count or sample rate mismatch, naming the file
    """
    root = Path(root)
    audio_path = _resolve(root, record.audio_path)
    waveform, sample_rate = sf.read(audio_path, dtype="float32", always_2d=True)
    if waveform.shape[1] != 2:
        raise DataError(f"{audio_path}: expected 2 channels, got {waveform.shape[1]}")
    if sample_rate != 16000:
        raise DataError(f"{audio_path}: expected 16 kHz, got {sample_rate} Hz")

    frames = np.load(_resolve(root, record.video_path))
    if frames.dtype == np.uint8:
        frames = frames.astype(np.float32) / 255

    labels = None
    if record.labels_path:
        labels = json.loads(_resolve(root, record.labels_path).read_text(encoding="utf-8"))

    clip = RawClip(
        frames=frames,
        waveform=waveform.T,
        clip_id=record.clip_id,
        dataset=record.dataset,
        start_time=record.start_time,
    )
    return clip, labels


class ManifestClips(Sequence):
    """
    Lazily loaded clips of a manifest, indexable like a list.
    """

    def __init__(self, manifest: Union[str, Path], split: Optional[str] = None, root: Optional[Union[str, Path]] = None):
        self.manifest = Path(manifest)
        self.root = Path(root) if root is not None else self.manifest.parent
        self.records = read_manifest(self.manifest, split)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        return load_clip(self.records[index], self.root)[0]

    def load(self, index: int) -> Tuple[RawClip, Optional[Dict]]:
        return load_clip(self.records[index], self.root)

    def labels(self, index: int) -> Optional[Dict]:
        return self.load(index)[1]

    def __iter__(self) -> Iterator[RawClip]:
        for i in range(len(self)):
            yield self[i]
