"""Text-only inference from a run directory, plus a Griffin-Lim demo vocoder."""
from __future__ import annotations

import io
import re
import wave
from dataclasses import dataclass

import numpy as np
import torch

from .acoustic_model import synthesize
from .checkpoints import RunLayout, load_acoustic, load_context_encoder, load_reference_encoder
from .context_encoder import window_tensors
from .context_window import ContextWindow, EmbeddingProvider, embed_window
from .data import Corpus, encode_phonemes
from .reference_encoder import FRAME_SIZE, HOP_LENGTH, N_MELS, SAMPLE_RATE
from .tensorio import atomic_write_bytes, file_sha256

# predicted phoneme pitch below this is rendered as unvoiced (F0 = 0)
VOICING_THRESHOLD_HZ = 40.0


def safe_name(uid: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", uid)


@dataclass
class Prediction:
    utterance_id: str
    mel: np.ndarray
    duration: np.ndarray
    pitch: np.ndarray
    phoneme_energy: np.ndarray
    attention: dict | None = None

    @property
    def f0(self) -> np.ndarray:
        hz = np.where(self.pitch >= VOICING_THRESHOLD_HZ, self.pitch, 0.0)
        return np.repeat(hz, self.duration)

    @property
    def energy(self) -> np.ndarray:
        return np.repeat(self.phoneme_energy, self.duration)

    def tensors(self) -> dict[str, np.ndarray]:
        return {"mel": self.mel, "f0": self.f0, "energy": self.energy,
                "duration": self.duration.astype(np.float32), "pitch": self.pitch,
                "phoneme_energy": self.phoneme_energy}


class Synthesizer:
    """Context encoder + acoustic model loaded from a run directory.

    ``style_source='reference'`` uses the stage-1 teacher on the ground-truth mel
    instead (analysis only; the deployed path needs text alone).
    """

    def __init__(self, run_dir, corpus: Corpus, provider: EmbeddingProvider,
                 style_source: str = "context"):
        self.layout = RunLayout(run_dir)
        self.corpus, self.provider, self.style_source = corpus, provider, style_source
        if style_source == "context":
            enc_path, ac_path = self.layout.inference_pair(corpus.manifest_path)
            self.encoder = load_context_encoder(enc_path)
            self.half_width = self.encoder.config.half_width
        elif style_source == "reference":
            hint = f"ctxtts train --stage 1 --data {corpus.manifest_path} --out {self.layout.root}"
            ac_path = self.layout.require(self.layout.teacher_acoustic, hint)
            enc_path = self.layout.require(self.layout.reference_encoder, hint)
            self.encoder = load_reference_encoder(enc_path)
            self.half_width = 2
        else:
            raise ValueError(f"unknown style source {style_source!r}")
        self.acoustic, self.vocab = load_acoustic(ac_path)
        self.checkpoints = {"style_encoder": str(enc_path), "acoustic_model": str(ac_path),
                            "style_encoder_sha256": file_sha256(enc_path),
                            "acoustic_model_sha256": file_sha256(ac_path)}

    @torch.no_grad()
    def style(self, uid: str, window: ContextWindow | None = None):
        if self.style_source == "reference":
            return self.encoder(torch.from_numpy(self.corpus.features(uid).mel.copy())), None
        if window is None:
            window = self.corpus.window(uid, self.half_width)
        if not window.is_embedded:
            window = embed_window(window, self.provider)
        style, weights = self.encoder([window_tensors(window)], return_weights=True)
        attention = None
        if weights:
            attention = {"sentences": [s.sentence_id for s in window.sentences],
                         "sentence_weights": weights["sentence"][0].tolist(),
                         "phrase_weights": [w.tolist() for w in weights["phrase"]]}
        return style[0], attention

    def __call__(self, uid: str, window: ContextWindow | None = None) -> Prediction:
        style, attention = self.style(uid, window)
        ids = encode_phonemes(self.corpus[uid].phonemes, self.vocab)
        mel, pred = synthesize(self.acoustic, ids, style)
        return Prediction(uid, mel, pred["duration"], pred["pitch"], pred["energy"], attention)


# -- Griffin-Lim demo vocoder ------------------------------------------------------

def mel_filterbank(sr: int = SAMPLE_RATE, n_fft: int = 2048, n_mels: int = N_MELS,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filters, shape [n_mels, n_fft // 2 + 1]."""
    fmax = fmax or sr / 2
    hz_to_mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)
    mel_to_hz = lambda m: 700.0 * (10 ** (m / 2595.0) - 1.0)
    pts = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.linspace(0, sr / 2, n_fft // 2 + 1)
    fb = np.zeros((n_mels, len(freqs)))
    for m in range(n_mels):
        lo, c, hi = pts[m], pts[m + 1], pts[m + 2]
        up = (freqs - lo) / max(c - lo, 1e-9)
        down = (hi - freqs) / max(hi - c, 1e-9)
        fb[m] = np.clip(np.minimum(up, down), 0, None)
    return fb


def griffin_lim(log_mel: np.ndarray, n_iter: int = 64, n_fft: int = 2048, seed: int = 0) -> np.ndarray:
    """Waveform from a natural-log mel magnitude spectrogram [T x 80]."""
    fb = mel_filterbank(n_fft=n_fft, n_mels=log_mel.shape[1])
    mag = np.clip(np.linalg.pinv(fb) @ np.exp(log_mel.T), 0.0, None)
    mag_t = torch.from_numpy(mag)
    window = torch.hann_window(FRAME_SIZE, dtype=torch.float64)
    kw = dict(n_fft=n_fft, hop_length=HOP_LENGTH, win_length=FRAME_SIZE, window=window, center=True)
    gen = torch.Generator().manual_seed(seed)
    phase = torch.exp(2j * np.pi * torch.rand(mag_t.shape, generator=gen, dtype=torch.float64))
    length = HOP_LENGTH * (log_mel.shape[0] - 1)
    audio = torch.istft(mag_t * phase, length=length, **kw)
    for _ in range(n_iter):
        spec = torch.stft(audio, return_complex=True, pad_mode="constant", **kw)
        spec = spec[:, : mag_t.shape[1]]
        phase = spec / spec.abs().clamp(min=1e-8)
        audio = torch.istft(mag_t * phase, length=length, **kw)
    return audio.numpy()


def write_wav(path, audio: np.ndarray, sr: int = SAMPLE_RATE) -> None:
    peak = float(np.abs(audio).max()) or 1.0
    pcm = np.round(audio / peak * 0.95 * 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sr)
        w.writeframes(pcm.tobytes())
    atomic_write_bytes(path, buf.getvalue())
