"""Scene synthesis: free-field plane waves, image-method rooms, SNR mixing."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq
from scipy.signal import butter, fftconvolve, sosfilt

from .errors import DomainError, ShapeError
from .sh_core import Direction
from .sht import ArrayGeometry, FrequencyGrid

SABINE_CONSTANT = 0.161
MAX_ABSORPTION = 0.9999
_SINC_TAPS = 8


class InfeasibleRoomError(DomainError):
    """Requested RT60 cannot be realized in the given room."""


def far_field_threshold(radius: float, freq: float, c: float = 343.0) -> float:
    """Minimum source distance ``8 r^2 f / c`` for negligible wavefront curvature."""
    return 8.0 * radius * radius * freq / c


# ---------------------------------------------------------------------------
# free field

@dataclass
class PlaneWaveSource:
    direction: Direction
    amplitude: np.ndarray  # (frame, bin) complex


def steering_vector(geom: ArrayGeometry, direction: Direction, grid: FrequencyGrid) -> np.ndarray:
    """``v_i(k) = exp(+j k r_i . u)`` for a wave arriving from ``direction``; shape ``(I, bin)``."""
    proj = geom.positions() @ direction.unit_vector()
    return np.exp(1j * np.outer(proj, grid.wavenumbers))


def simulate_freefield(sources, geom: ArrayGeometry, grid: FrequencyGrid, noise=None) -> np.ndarray:
    """Mic spectra ``p_i = sum_l v_i(Psi_l) s_l + n_i``, shape ``(I, frame, bin)``."""
    out = None
    for src in sources:
        amp = np.asarray(src.amplitude)
        if amp.ndim != 2 or amp.shape[-1] != grid.n_bins:
            raise ShapeError(f"source amplitude must be (frame, {grid.n_bins}), got {amp.shape}")
        term = steering_vector(geom, src.direction, grid)[:, None, :] * amp[None]
        out = term if out is None else out + term
    if noise is not None:
        noise = np.asarray(noise)
        if out is not None and noise.shape != out.shape:
            raise ShapeError(f"noise shape {noise.shape} != signal shape {out.shape}")
        out = noise.astype(np.complex128) if out is None else out + noise
    if out is None:
        raise ShapeError("need at least one source or a noise field")
    return out


# ---------------------------------------------------------------------------
# rooms

@dataclass(frozen=True)
class RoomSpec:
    dims: tuple = (6.0, 5.0, 4.0)
    rt60: float = 0.5
    fs: float = 16000.0
    c: float = 343.0

    def __post_init__(self):
        dims = tuple(float(d) for d in self.dims)
        if len(dims) != 3 or min(dims) <= 0:
            raise DomainError(f"room dimensions must be three positive lengths, got {self.dims}")
        if not 0.05 <= self.rt60 <= 3.0:
            raise DomainError(f"rt60={self.rt60} s outside [0.05, 3.0]")
        object.__setattr__(self, "dims", dims)

    @property
    def volume(self) -> float:
        x, y, z = self.dims
        return x * y * z

    @property
    def surface(self) -> float:
        x, y, z = self.dims
        return 2.0 * (x * y + y * z + x * z)

    def contains(self, pos, margin: float = 0.0) -> bool:
        pos = np.asarray(pos, float)
        return bool(np.all(pos >= margin) and np.all(pos <= np.asarray(self.dims) - margin))


def sabine_absorption(room: RoomSpec) -> float:
    """Uniform energy absorption ``alpha = 0.161 V / (S rt60)`` from Sabine's relation."""
    alpha = SABINE_CONSTANT * room.volume / (room.surface * room.rt60)
    if alpha > 1.0:
        raise InfeasibleRoomError(
            f"rt60={room.rt60} s needs alpha={alpha:.3f} > 1 in a {room.dims} room")
    return min(alpha, MAX_ABSORPTION)


def _rir_length(room: RoomSpec) -> int:
    return int(math.ceil(room.rt60 * room.fs))


def _image_sources(room: RoomSpec, src, reach: float, max_order: int | None):
    """Image positions ``(M, 3)`` and reflection counts ``(M,)`` within ``reach`` of the room."""
    dims = np.asarray(room.dims)
    per_axis = []
    for a in range(3):
        nmax = int(math.ceil(reach / (2.0 * dims[a]))) + 1
        n = np.arange(-nmax, nmax + 1)
        q = np.array([0, 1])[:, None]
        pos = ((1 - 2 * q) * src[a] + 2 * n[None] * dims[a]).ravel()
        refl = (np.abs(n[None] - q) + np.abs(n[None])).ravel()
        per_axis.append((pos, refl))
    (px, kx), (py, ky), (pz, kz) = per_axis
    k = kx[:, None, None] + ky[None, :, None] + kz[None, None, :]
    pos = np.stack(np.broadcast_arrays(px[:, None, None], py[None, :, None], pz[None, None, :]), -1)
    center = dims / 2.0
    dist = np.linalg.norm(pos - center, axis=-1)
    keep = dist <= reach + np.linalg.norm(center)
    if max_order is not None:
        keep &= k <= max_order
    return pos[keep], k[keep]


def schroeder_t60(h, fs: float, lo_db: float = -5.0, hi_db: float = -35.0) -> float:
    """T60 from a linear fit to the Schroeder backward-integrated decay between two levels."""
    e = np.cumsum(np.asarray(h, float)[::-1] ** 2)[::-1]
    return _t60_from_edc(e, fs, lo_db, hi_db)


def _t60_from_edc(e, rate, lo_db, hi_db):
    edc = 10.0 * np.log10(np.maximum(e / e[0], 1e-300))
    i0 = int(np.argmax(edc <= lo_db))
    i1 = int(np.argmax(edc <= hi_db))
    if i1 <= i0 + 1:
        return float("nan")
    t = np.arange(i0, i1) / rate
    slope = np.polyfit(t, edc[i0:i1], 1)[0]
    return -60.0 / slope


def calibrated_reflectivity(room: RoomSpec, src, receiver, max_order: int | None = None) -> float:
    """Wall reflectivity whose image-lattice energy decay has the requested RT60.

    Sabine's absorption is only the starting guess: in a rectangular room
    with uniform walls the image sum decays non-exponentially (axial paths
    reflect less often), so the raw Sabine value overshoots the target RT60
    at low absorption. Here the incoherent energy envelope of the image
    lattice is binned by (arrival time, reflection count) once, and the
    reflectivity is solved so that its Schroeder T30 equals ``room.rt60``.
    """
    length = _rir_length(room)
    reach = length * room.c / room.fs
    pos, k = _image_sources(room, np.asarray(src, float), reach, max_order)
    d = np.linalg.norm(pos - np.asarray(receiver, float), axis=1)
    bin_rate = 1000.0
    tbin = np.floor(d / room.c * bin_rate).astype(np.int64)
    keep = tbin < int(room.rt60 * bin_rate)
    n_t = int(room.rt60 * bin_rate)
    hist = np.zeros((n_t, int(k.max()) + 1))
    np.add.at(hist, (tbin[keep], k[keep]), 1.0 / (4.0 * math.pi * d[keep]) ** 2)
    kk = np.arange(hist.shape[1])

    def t60_of(beta):
        energy = hist @ (beta ** (2.0 * kk))
        return _t60_from_edc(np.cumsum(energy[::-1])[::-1], bin_rate, -5.0, -35.0)

    beta0 = math.sqrt(1.0 - sabine_absorption(room))

    def f(b):
        val = t60_of(b)
        return (0.0 if math.isnan(val) else val) - room.rt60

    # the response is truncated at rt60, so the fitted T60 saturates as
    # beta -> 1; bracket the root by stepping up from the Sabine guess
    lo, f_lo = beta0, f(beta0)
    if f_lo > 0:
        hi = lo
        while f_lo > 0:
            hi, lo = lo, lo * 0.9
            f_lo = f(lo)
            if lo < 1e-3:
                return lo
    else:
        hi = lo
        while True:
            hi = 1.0 - (1.0 - hi) * 0.7
            if f(hi) > 0:
                break
            if 1.0 - hi < 1e-6:
                raise InfeasibleRoomError(f"rt60={room.rt60} s not reachable in a {room.dims} room")
            lo = hi
    return brentq(f, lo, hi, xtol=1e-12)


def _fractional_impulses(tau, amp, length: int) -> np.ndarray:
    """Sum of Hann-windowed sinc pulses ``amp * h(n - tau)`` over ``_SINC_TAPS`` taps.

    With ``f = tau - floor(tau)`` and tap offset ``o`` the kernel argument is
    ``x = o - f``, so ``sin(pi x) = (-1)^(o+1) sin(pi f)`` and the window
    cosine splits by angle addition; only three transcendental evaluations
    per pulse are needed instead of two per tap.
    """
    n0 = np.floor(tau).astype(np.int64)
    f = tau - n0
    s_pi = np.sin(math.pi * f) / math.pi
    quarter = math.pi / (_SINC_TAPS / 2)
    c_w, s_w = np.cos(quarter * f), np.sin(quarter * f)
    out = np.zeros(length)
    for o in range(-(_SINC_TAPS // 2) + 1, _SINC_TAPS // 2 + 1):
        x = o - f
        with np.errstate(divide="ignore", invalid="ignore"):
            sinc = np.where(x == 0.0, 1.0, (-1.0) ** (o + 1) * s_pi / x)
        win = 0.5 + 0.5 * (math.cos(quarter * o) * c_w + math.sin(quarter * o) * s_w)
        idx = n0 + o
        ok = (idx >= 0) & (idx < length)
        out += np.bincount(idx[ok], weights=(amp * sinc * win)[ok], minlength=length)[:length]
    return out


def room_impulse_responses(room: RoomSpec, src, mics, max_order: int | None = None,
                           absorption: float | str | None = None,
                           reference=None, highpass_hz: float | None = 100.0) -> np.ndarray:
    """Image-method impulse responses from one source to many receivers.

    Parameters
    ----------
    room : RoomSpec
    src : (3,) array_like
        Source position in meters.
    mics : (M, 3) array_like
        Receiver positions.
    max_order : int, optional
        Keep only images with at most this many reflections.
    absorption : float, "sabine" or None
        Energy absorption of the walls. A float or ``"sabine"`` sets the
        reflectivity to ``sqrt(1 - alpha)`` directly; ``None`` (default)
        calibrates it so the RT60 matches ``room.rt60``.
    reference : (3,) array_like, optional
        Receiver used for calibration (default: mean mic position).
    highpass_hz : float or None
        Cutoff of the 2nd-order Butterworth high-pass applied to every
        response. With all-positive image pulses the dense late tail builds
        up a slowly decaying low-frequency offset that distorts the energy
        decay; the high-pass removes it. ``None`` disables the filter.

    Returns
    -------
    ndarray, shape (M, ceil(rt60 * fs))
    """
    src = np.asarray(src, float)
    mics = np.atleast_2d(np.asarray(mics, float))
    if not room.contains(src) or not all(room.contains(m) for m in mics):
        raise DomainError("source and receivers must lie inside the room")
    if np.any(np.linalg.norm(mics - src, axis=1) < 1e-9):
        raise DomainError("source coincides with a receiver")
    if absorption is None:
        ref = mics.mean(axis=0) if reference is None else np.asarray(reference, float)
        beta = calibrated_reflectivity(room, src, ref, max_order)
    else:
        alpha = sabine_absorption(room) if absorption == "sabine" else float(absorption)
        if not 0.0 < alpha <= 1.0:
            raise DomainError(f"absorption {alpha} outside (0, 1]")
        beta = math.sqrt(1.0 - min(alpha, MAX_ABSORPTION))

    length = _rir_length(room)
    reach = length * room.c / room.fs
    pos, k = _image_sources(room, src, reach, max_order)
    gain = beta ** k.astype(float)
    out = np.zeros((len(mics), length))
    for i, mic in enumerate(mics):
        d = np.linalg.norm(pos - mic, axis=1)
        tau = d * room.fs / room.c
        sel = tau < length + _SINC_TAPS
        out[i] = _fractional_impulses(tau[sel], gain[sel] / (4.0 * math.pi * d[sel]), length)
    if highpass_hz:
        out = sosfilt(butter(2, highpass_hz, "highpass", fs=room.fs, output="sos"), out, axis=-1)
    return out


def image_method_rir(room: RoomSpec, src, mic, max_order: int | None = None,
                     absorption: float | str | None = None,
                     highpass_hz: float | None = 100.0) -> np.ndarray:
    """Single-receiver convenience wrapper around :func:`room_impulse_responses`."""
    return room_impulse_responses(room, src, [mic], max_order, absorption,
                                  highpass_hz=highpass_hz)[0]


# ---------------------------------------------------------------------------
# mixing and scenes

def _power(x) -> float:
    return float(np.mean(np.asarray(x, float) ** 2))


def mix_at_snr(clean, noise, snr_db: float, ref_channel: int = 0):
    """Scale ``noise`` globally so the reference-channel SNR equals ``snr_db``.

    Returns ``(mixture, scaled_noise)``.
    """
    clean = np.atleast_2d(np.asarray(clean, float))
    noise = np.atleast_2d(np.asarray(noise, float))
    if clean.shape != noise.shape:
        raise ShapeError(f"clean {clean.shape} and noise {noise.shape} differ")
    pc, pn = _power(clean[ref_channel]), _power(noise[ref_channel])
    if pc == 0 or pn == 0:
        raise DomainError("clean and noise must have nonzero power on the reference channel")
    scale = math.sqrt(pc / (pn * 10.0 ** (snr_db / 10.0)))
    scaled = noise * scale
    return clean + scaled, scaled


def measured_snr(clean, noise, ref_channel: int = 0) -> float:
    clean = np.atleast_2d(clean)
    noise = np.atleast_2d(noise)
    return 10.0 * math.log10(_power(clean[ref_channel]) / _power(noise[ref_channel]))


@dataclass
class SceneSpec:
    """Everything needed to synthesize one reverberant noisy multichannel scene.

    ``array_center=None`` places the array at random (``margin`` meters from
    every wall, seeded); ``source_azimuth=None`` draws a random azimuth in the
    plane ``theta = source_theta``.
    """

    room: RoomSpec = field(default_factory=RoomSpec)
    geometry: ArrayGeometry | None = None
    array_center: tuple | None = None
    source_distance: float = 1.0
    source_azimuth: float | None = None
    source_theta: float = math.pi / 2
    noise_kind: str = "white"
    noise_position: tuple | None = None
    snr_db: float = 0.0
    seed: int = 0
    target: str = "reverberant"
    ref_mic: int = 0
    margin: float = 0.5
    lead_silence: float = 0.25


@dataclass
class Scene:
    mixture: np.ndarray
    clean_ref: np.ndarray
    noise: np.ndarray
    manifest: dict


def _place(spec: SceneSpec, rng: np.random.Generator):
    dims = np.asarray(spec.room.dims)
    for _ in range(1000):
        center = (np.asarray(spec.array_center, float) if spec.array_center is not None
                  else rng.uniform(spec.margin, dims - spec.margin))
        az = spec.source_azimuth if spec.source_azimuth is not None else rng.uniform(0, 2 * math.pi)
        u = Direction(spec.source_theta, az).unit_vector()
        src = center + spec.source_distance * u
        if spec.room.contains(src, spec.margin) and spec.room.contains(center, spec.margin):
            return center, src, float(az % (2 * math.pi))
        if spec.array_center is not None and spec.source_azimuth is not None:
            break
    raise DomainError("could not place source and array inside the room with the requested margin")


def synth_scene(spec: SceneSpec, speech, noise=None) -> Scene:
    """Render one scene: reverberant speech at the mics plus noise at ``spec.snr_db``.

    ``clean_ref`` is the reverberant speech at the mics (``target="reverberant"``)
    or its direct-path-only counterpart (``target="anechoic"``). Noise is
    independent white Gaussian per mic (``noise_kind="white"``) or a point
    source rendered through its own impulse responses (``"point"``).
    """
    from .sht import uca_geometry

    geom = spec.geometry if spec.geometry is not None else uca_geometry(16, 0.035)
    room = spec.room
    rng = np.random.default_rng(spec.seed)
    center, src, az = _place(spec, rng)
    mics = center + geom.positions()

    speech = np.asarray(speech, float)
    n_lead = int(round(spec.lead_silence * room.fs))
    speech = np.concatenate([np.zeros(n_lead), speech])
    n = speech.size

    rirs = room_impulse_responses(room, src, mics, reference=center)
    reverberant = np.stack([fftconvolve(speech, h)[:n] for h in rirs])
    if spec.target == "reverberant":
        clean = reverberant
    elif spec.target == "anechoic":
        direct = room_impulse_responses(room, src, mics, max_order=0, absorption=MAX_ABSORPTION)
        clean = np.stack([fftconvolve(speech, h)[:n] for h in direct])
    else:
        raise DomainError(f"unknown target {spec.target!r}")

    noise_pos = None
    if spec.noise_kind == "white":
        raw_noise = rng.standard_normal((geom.n_mics, n))
    elif spec.noise_kind == "point":
        if spec.noise_position is not None:
            noise_pos = np.asarray(spec.noise_position, float)
        else:
            noise_pos = rng.uniform(spec.margin, np.asarray(room.dims) - spec.margin)
        sig = rng.standard_normal(n) if noise is None else np.resize(np.asarray(noise, float), n)
        nrirs = room_impulse_responses(room, noise_pos, mics, reference=center)
        raw_noise = np.stack([fftconvolve(sig, h)[:n] for h in nrirs])
    else:
        raise DomainError(f"unknown noise kind {spec.noise_kind!r}")

    # SNR is defined against the signal actually present at the mics
    _, scaled_noise = mix_at_snr(reverberant, raw_noise, spec.snr_db, spec.ref_mic)
    mixture = reverberant + scaled_noise
    manifest = {
        "seed": spec.seed,
        "snr_db": spec.snr_db,
        "rt60": room.rt60,
        "room_dims": list(room.dims),
        "fs": room.fs,
        "c": room.c,
        "geometry": geom.to_dict(),
        "n_mics": geom.n_mics,
        "array_radius": float(geom.radius.max()),
        "array_center": center.tolist(),
        "source_position": src.tolist(),
        "source_distance": spec.source_distance,
        "source_azimuth": az,
        "source_theta": spec.source_theta,
        "noise_kind": spec.noise_kind,
        "noise_position": None if noise_pos is None else noise_pos.tolist(),
        "target": spec.target,
        "ref_mic": spec.ref_mic,
        "lead_silence": spec.lead_silence,
        "n_samples": n,
        "far_field_threshold_8k": far_field_threshold(float(geom.radius.max()), 8000.0, room.c),
    }
    return Scene(mixture, clean, scaled_noise, manifest)


def speech_like(duration: float, fs: float = 16000.0, seed: int = 0) -> np.ndarray:
    """Deterministic speech-like test signal.

    Voiced syllables (harmonic series with a gliding pitch, two moving
    formant resonances, syllabic amplitude envelope) separated by silent
    gaps of varying length, with occasional short fricative noise bursts.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * fs))
    out = np.zeros(n)
    t0 = int(rng.uniform(0.05, 0.15) * fs)
    while t0 < n:
        dur = int(rng.uniform(0.12, 0.35) * fs)
        seg = min(dur, n - t0)
        t = np.arange(seg) / fs
        f0 = rng.uniform(90, 220) * (1.0 + rng.uniform(-0.15, 0.15) * t / max(t[-1], 1e-3)) if seg else 0
        phase = 2 * math.pi * np.cumsum(np.broadcast_to(f0, t.shape)) / fs
        f1, f2 = rng.uniform(300, 800), rng.uniform(900, 2500)
        env = np.sin(math.pi * np.arange(seg) / max(dur, 1)) ** 0.7
        env *= 1.0 + 0.3 * np.sin(2 * math.pi * rng.uniform(3, 6) * t)
        voiced = np.zeros(seg)
        f0_mean = float(np.mean(f0)) if seg else 1.0
        for h in range(1, int(4000 / f0_mean) + 1):
            fh = h * f0_mean
            formant = (1.0 / (1.0 + ((fh - f1) / 120.0) ** 2)
                       + 0.6 / (1.0 + ((fh - f2) / 200.0) ** 2) + 0.05)
            voiced += formant / h ** 0.5 * np.sin(h * phase + rng.uniform(0, 2 * math.pi))
        seg_sig = env * voiced
        if rng.random() < 0.3:
            burst = int(min(seg, 0.06 * fs))
            hiss = np.diff(rng.standard_normal(burst + 1)) * 0.15
            seg_sig[:burst] += hiss * np.hanning(burst)
        out[t0:t0 + seg] = seg_sig
        gap = rng.uniform(0.04, 0.2) if rng.random() < 0.8 else rng.uniform(0.3, 0.5)
        t0 += dur + int(gap * fs)
    peak = np.max(np.abs(out))
    return out * (0.5 / peak) if peak > 0 else out


def with_rt60(spec: SceneSpec, rt60: float, snr_db: float) -> SceneSpec:
    return replace(spec, room=replace(spec.room, rt60=rt60), snr_db=snr_db)
