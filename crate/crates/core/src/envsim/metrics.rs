use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Everything the navigation metrics need from one episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub success: bool,
    /// Cells actually travelled.
    pub path_length: u32,
    /// Geodesic distance from start to source.
    pub shortest_path: u32,
    /// Actions taken, including the final Stop.
    pub actions: u32,
    /// Fewest actions that could have succeeded, including Stop.
    pub min_actions: u32,
}

fn ratio(best: u32, actual: u32) -> f64 {
    let denom = best.max(actual);
    if denom == 0 {
        1.0
    } else {
        f64::from(best) / f64::from(denom)
    }
}

impl EpisodeRecord {
    pub fn validate(&self) -> Result<()> {
        if self.success && self.path_length < self.shortest_path {
            return Err(Error::DataIntegrity(format!(
                "successful episode travelled {} cells but the shortest path is {}",
                self.path_length, self.shortest_path
            )));
        }
        Ok(())
    }

    pub fn spl(&self) -> f64 {
        if self.success {
            ratio(self.shortest_path, self.path_length)
        } else {
            0.0
        }
    }

    pub fn sna(&self) -> f64 {
        if self.success {
            ratio(self.min_actions, self.actions)
        } else {
            0.0
        }
    }
}

/// Success rate, SPL and SNA as fractions in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sr: f64,
    pub spl: f64,
    pub sna: f64,
    pub episodes: usize,
}

pub fn compute_metrics(episodes: &[EpisodeRecord]) -> Result<Metrics> {
    if episodes.is_empty() {
        return Err(Error::Contract("no episodes to score".into()));
    }
    let (mut sr, mut spl, mut sna) = (0.0, 0.0, 0.0);
    for e in episodes {
        e.validate()?;
        sr += if e.success { 1.0 } else { 0.0 };
        spl += e.spl();
        sna += e.sna();
    }
    let n = episodes.len() as f64;
    Ok(Metrics {
        sr: sr / n,
        spl: spl / n,
        sna: sna / n,
        episodes: episodes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(success: bool, p: u32, l: u32, n: u32, n_star: u32) -> EpisodeRecord {
        EpisodeRecord {
            success,
            path_length: p,
            shortest_path: l,
            actions: n,
            min_actions: n_star,
        }
    }

    #[test]
    fn examples() {
        assert_eq!(rec(true, 8, 4, 9, 5).spl(), 0.5);
        let failed = rec(false, 4, 4, 5, 5);
        assert_eq!((failed.spl(), failed.sna()), (0.0, 0.0));
        assert_eq!(rec(true, 4, 4, 5, 5).sna(), 1.0);
        assert_eq!(rec(true, 0, 0, 1, 1).spl(), 1.0);
    }

    #[test]
    fn aggregates() {
        let m = compute_metrics(&[rec(true, 8, 4, 10, 5), rec(false, 3, 4, 20, 5)]).unwrap();
        assert_eq!((m.sr, m.spl, m.sna, m.episodes), (0.5, 0.25, 0.25, 2));
    }

    #[test]
    fn short_successful_path_is_rejected() {
        let r = compute_metrics(&[rec(true, 2, 4, 5, 5)]);
        assert!(matches!(r, Err(Error::DataIntegrity(_))));
        assert!(compute_metrics(&[]).is_err());
    }
}
