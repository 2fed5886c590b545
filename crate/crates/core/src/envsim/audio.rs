use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::geodesic::DistanceField;
use super::map::{Cell, GridMap};
use super::Heading;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioConfig {
    /// Frequency bands `F`.
    pub bands: usize,
    /// Time frames `T`.
    pub frames: usize,
    /// Half-width of the multiplicative noise around 1.
    pub noise: f64,
    /// Nonzero bands per random signature.
    pub active_bands: usize,
}

impl Default for AudioConfig {
    fn default() -> Self {
        AudioConfig {
            bands: 16,
            frames: 16,
            noise: 0.05,
            active_bands: 3,
        }
    }
}

/// Per-band amplitudes of one sound class, scaled so the loudest band is 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Signature(pub Vec<f64>);

impl Signature {
    pub fn new(mut bands: Vec<f64>) -> Result<Self> {
        let max = bands.iter().copied().fold(0.0, f64::max);
        if bands.iter().any(|v| !v.is_finite() || *v < 0.0) || max <= 0.0 {
            return Err(Error::Config(
                "a signature needs nonnegative bands with at least one nonzero".into(),
            ));
        }
        bands.iter_mut().for_each(|v| *v /= max);
        Ok(Signature(bands))
    }

    /// `active` nonzero bands with amplitudes in `[0.2, 1]`.
    pub fn random(bands: usize, active: usize, rng: &mut impl Rng) -> Self {
        let mut values = vec![0.0; bands];
        for i in sample(rng, bands, active.clamp(1, bands)) {
            values[i] = rng.gen_range(0.2..=1.0);
        }
        Signature::new(values).expect("at least one band is positive")
    }

    pub fn active_set(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&i| self.0[i] > 0.0).collect()
    }
}

/// Training ("heard") and held-out ("unheard") sound classes. No two
/// signatures share the same set of active bands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignaturePools {
    pub heard: Vec<Signature>,
    pub unheard: Vec<Signature>,
}

impl SignaturePools {
    pub fn generate(heard: usize, unheard: usize, cfg: &AudioConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut draw = |n: usize| -> Result<Vec<Signature>> {
            let mut out = Vec::with_capacity(n);
            let mut attempts = 0;
            while out.len() < n {
                attempts += 1;
                if attempts > 100 * (n + 10) {
                    return Err(Error::Config(format!(
                        "cannot draw {} distinct signatures over {} bands",
                        heard + unheard,
                        cfg.bands
                    )));
                }
                let s = Signature::random(cfg.bands, cfg.active_bands, rng);
                if seen.insert(s.active_set()) {
                    out.push(s);
                }
            }
            Ok(out)
        };
        let heard = draw(heard)?;
        let unheard = draw(unheard)?;
        Ok(SignaturePools { heard, unheard })
    }

    pub fn is_disjoint(&self) -> bool {
        self.heard
            .iter()
            .all(|h| self.unheard.iter().all(|u| h.active_set() != u.active_set()))
    }
}

/// Per-episode multiplicative noise, laid out like the spectrogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseField(pub Vec<f64>);

impl NoiseField {
    pub fn sample(cfg: &AudioConfig, rng: &mut impl Rng) -> Self {
        let n = cfg.bands * cfg.frames * 2;
        NoiseField(
            (0..n)
                .map(|_| 1.0 + cfg.noise * rng.gen_range(-1.0..=1.0))
                .collect(),
        )
    }

    /// Equal noise in both channels.
    pub fn symmetric(cfg: &AudioConfig, rng: &mut impl Rng) -> Self {
        let mut v = Self::sample(cfg, rng).0;
        for pair in v.chunks_mut(2) {
            pair[1] = pair[0];
        }
        NoiseField(v)
    }

    pub fn ones(cfg: &AudioConfig) -> Self {
        NoiseField(vec![1.0; cfg.bands * cfg.frames * 2])
    }
}

/// Bearing in degrees (left positive) of the first step along a shortest
/// path to the source, relative to `heading`. When several neighbours lie on
/// shortest paths the preference is ahead, left, right, behind. Zero on the
/// source itself; `None` when the source is unreachable.
pub fn bearing(map: &GridMap, field: &DistanceField, pos: Cell, heading: Heading) -> Option<f64> {
    let d = field.get(pos)?;
    if d == 0 {
        return Some(0.0);
    }
    let options = [
        (heading, 0.0),
        (heading.turn_left(), 90.0),
        (heading.turn_right(), -90.0),
        (heading.reverse(), 180.0),
    ];
    options.into_iter().find_map(|(h, angle)| {
        h.advance(map, pos)
            .filter(|&n| field.get(n) == Some(d - 1))
            .map(|_| angle)
    })
}

/// `F x T x 2` spectrogram heard at `pos` facing `heading`.
///
/// Band `f` of channel `k` is `signature[f] * a * g_k * noise`, with
/// amplitude `a = 1 / (1 + d)` for geodesic distance `d` and interaural gains
/// `g_L = (1 + sin t) / 2`, `g_R = (1 - sin t) / 2` where `t` is the bearing
/// clamped to [-90, 90] degrees. An unreachable source is silent.
pub fn synth_binaural(
    map: &GridMap,
    field: &DistanceField,
    pos: Cell,
    heading: Heading,
    signature: &Signature,
    noise: &NoiseField,
    cfg: &AudioConfig,
) -> Tensor {
    let (f_n, t_n) = (cfg.bands, cfg.frames);
    let mut data = vec![0.0; f_n * t_n * 2];
    if let (Some(d), Some(theta)) = (field.get(pos), bearing(map, field, pos, heading)) {
        let amp = 1.0 / (1.0 + d as f64);
        let s = theta.clamp(-90.0, 90.0).to_radians().sin();
        let gains = [0.5 * (1.0 + s), 0.5 * (1.0 - s)];
        for f in 0..f_n {
            let base = signature.0.get(f).copied().unwrap_or(0.0) * amp;
            for t in 0..t_n {
                for (k, g) in gains.iter().enumerate() {
                    let i = (f * t_n + t) * 2 + k;
                    data[i] = base * g * noise.0[i];
                }
            }
        }
    }
    Tensor::new([f_n, t_n, 2], data).expect("sizes agree")
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::nn::module_rng;

    fn channel_energy(spec: &Tensor) -> (f64, f64) {
        let mut e = (0.0, 0.0);
        for pair in spec.data().chunks(2) {
            e.0 += pair[0] * pair[0];
            e.1 += pair[1] * pair[1];
        }
        e
    }

    fn quiet() -> AudioConfig {
        AudioConfig {
            noise: 0.0,
            ..AudioConfig::default()
        }
    }

    #[test]
    fn source_ahead_is_balanced() {
        let map = GridMap::bundled("corridor").unwrap();
        let field = DistanceField::new(&map, Cell::new(7, 1)).unwrap();
        let cfg = quiet();
        let sig = Signature::random(cfg.bands, 3, &mut module_rng(0, "sig"));
        let pos = Cell::new(2, 1);
        assert_eq!(bearing(&map, &field, pos, Heading::East), Some(0.0));
        let spec = synth_binaural(&map, &field, pos, Heading::East, &sig, &NoiseField::ones(&cfg), &cfg);
        let (l, r) = channel_energy(&spec);
        assert_eq!(l, r);
        assert!(l > 0.0);
    }

    #[test]
    fn source_to_the_left_is_left_only() {
        let map = GridMap::bundled("corridor").unwrap();
        let field = DistanceField::new(&map, Cell::new(7, 1)).unwrap();
        let cfg = quiet();
        let sig = Signature::new(vec![1.0; cfg.bands]).unwrap();
        // facing south, east is to the left
        let pos = Cell::new(4, 1);
        assert_eq!(bearing(&map, &field, pos, Heading::South), Some(90.0));
        let spec = synth_binaural(&map, &field, pos, Heading::South, &sig, &NoiseField::ones(&cfg), &cfg);
        let (l, r) = channel_energy(&spec);
        assert!(l > 0.0);
        assert_eq!(r, 0.0);
        // and behind clamps to the left
        assert_eq!(bearing(&map, &field, pos, Heading::West), Some(180.0));
    }

    #[test]
    fn amplitude_falls_with_distance() {
        let map = GridMap::bundled("corridor").unwrap();
        let field = DistanceField::new(&map, Cell::new(7, 1)).unwrap();
        let cfg = quiet();
        let sig = Signature::new(vec![1.0; cfg.bands]).unwrap();
        let ones = NoiseField::ones(&cfg);
        let near = synth_binaural(&map, &field, Cell::new(6, 1), Heading::East, &sig, &ones, &cfg);
        let far = synth_binaural(&map, &field, Cell::new(4, 1), Heading::East, &sig, &ones, &cfg);
        // a = 1/2 and 1/4, each split evenly between the channels
        assert_eq!(near.data()[0], 0.25);
        assert_eq!(far.data()[0], 0.125);
    }

    #[test]
    fn unreachable_source_is_silent() {
        let map = GridMap::parse("#######\n#..#..#\n#######\n").unwrap();
        let field = DistanceField::new(&map, Cell::new(5, 1)).unwrap();
        let cfg = AudioConfig::default();
        let sig = Signature::random(cfg.bands, 3, &mut module_rng(1, "sig"));
        let noise = NoiseField::sample(&cfg, &mut module_rng(2, "noise"));
        let spec = synth_binaural(&map, &field, Cell::new(1, 1), Heading::East, &sig, &noise, &cfg);
        assert!(spec.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_stays_in_band() {
        let cfg = AudioConfig::default();
        let noise = NoiseField::sample(&cfg, &mut module_rng(3, "noise"));
        assert!(noise.0.iter().all(|v| (0.95..=1.05).contains(v)));
    }

    #[test]
    fn pools_are_disjoint() {
        let cfg = AudioConfig::default();
        let pools = SignaturePools::generate(8, 4, &cfg, &mut module_rng(4, "pools")).unwrap();
        assert_eq!((pools.heard.len(), pools.unheard.len()), (8, 4));
        assert!(pools.is_disjoint());
        for s in pools.heard.iter().chain(&pools.unheard) {
            assert_eq!(s.0.iter().copied().fold(0.0, f64::max), 1.0);
        }
    }

    #[test]
    fn mirroring_swaps_channels() {
        let mut rng = module_rng(5, "mirror");
        let cfg = AudioConfig::default();
        let mut checked = 0;
        for _ in 0..100 {
            let map = GridMap::random(9, 9, 0.25, &mut rng).unwrap();
            let free = map.free_cells();
            let src = free[rng.gen_range(0..free.len())];
            let pos = free[rng.gen_range(0..free.len())];
            // the mirror axis is the heading axis, so face north or south
            let heading = if rng.gen_bool(0.5) { Heading::North } else { Heading::South };
            let field = DistanceField::new(&map, src).unwrap();
            let Some(theta) = bearing(&map, &field, pos, heading) else {
                continue;
            };
            // skip states the left-first tie break resolves asymmetrically
            let mirrored_map = map.mirror_x();
            let m_src = map.mirror_cell_x(src);
            let m_pos = map.mirror_cell_x(pos);
            let m_field = DistanceField::new(&mirrored_map, m_src).unwrap();
            let m_theta = bearing(&mirrored_map, &m_field, m_pos, heading.mirror_x()).unwrap();
            if theta.abs() == 180.0 || m_theta != -theta {
                continue;
            }
            let sig = Signature::random(cfg.bands, 3, &mut rng);
            let noise = NoiseField::symmetric(&cfg, &mut rng);
            let a = synth_binaural(&map, &field, pos, heading, &sig, &noise, &cfg);
            let b = synth_binaural(&mirrored_map, &m_field, m_pos, heading.mirror_x(), &sig, &noise, &cfg);
            for (pa, pb) in a.data().chunks(2).zip(b.data().chunks(2)) {
                assert_eq!(pa[0], pb[1]);
                assert_eq!(pa[1], pb[0]);
            }
            checked += 1;
        }
        assert!(checked > 30, "only {checked} unambiguous states");
    }
}
