use std::fmt::Write;

use crate::envsim::{Cell, EpisodeLog, GridMap};
use crate::error::{Error, Result};

const CELL: usize = 32;
const MARGIN: usize = 24;

fn center(c: (usize, usize)) -> (usize, usize) {
    (MARGIN + c.0 * CELL + CELL / 2, MARGIN + c.1 * CELL + CELL / 2)
}

fn check(map: &GridMap, what: &str, c: (usize, usize)) -> Result<()> {
    if c.0 >= map.width() || c.1 >= map.height() {
        return Err(Error::DataIntegrity(format!(
            "{what} ({}, {}) lies outside the {}x{} map",
            c.0,
            c.1,
            map.width(),
            map.height()
        )));
    }
    Ok(())
}

/// SVG figure of one episode: walls, source, start, path and its SPL.
/// Successful paths are solid blue, failed ones dashed red.
pub fn render_svg(log: &EpisodeLog, map: &GridMap) -> Result<String> {
    let h = &log.header;
    check(map, "source", (h.source.x, h.source.y))?;
    check(map, "start", (h.start.x, h.start.y))?;
    let path = log.path();
    for &p in &path {
        check(map, "step", p)?;
    }
    let rec = log.to_record();
    let spl = log.outcome.as_ref().map_or(rec.spl(), |o| o.spl);
    let success = log.outcome.as_ref().map_or(rec.success, |o| o.success);

    let (w, hgt) = (map.width() * CELL + 2 * MARGIN, map.height() * CELL + 2 * MARGIN + 20);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{hgt}" viewBox="0 0 {w} {hgt}">"#
    );
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{w}" height="{hgt}" fill="#ffffff"/>"##);
    for y in 0..map.height() {
        for x in 0..map.width() {
            if map.is_wall(Cell::new(x, y)) {
                let _ = writeln!(
                    s,
                    r##"<rect class="wall" x="{}" y="{}" width="{CELL}" height="{CELL}" fill="#404040"/>"##,
                    MARGIN + x * CELL,
                    MARGIN + y * CELL
                );
            }
        }
    }
    let (sx, sy) = center((h.start.x, h.start.y));
    let half = CELL / 4;
    let _ = writeln!(
        s,
        r##"<rect class="start" x="{}" y="{}" width="{}" height="{}" fill="#2ca02c"/>"##,
        sx - half,
        sy - half,
        2 * half,
        2 * half
    );
    let (gx, gy) = center((h.source.x, h.source.y));
    let _ = writeln!(
        s,
        r##"<circle class="source" cx="{gx}" cy="{gy}" r="{}" fill="#ff7f0e"/>"##,
        CELL / 3
    );
    let points: Vec<String> = path
        .iter()
        .map(|&c| {
            let (x, y) = center(c);
            format!("{x},{y}")
        })
        .collect();
    let style = if success {
        r##"stroke="#1f77b4" stroke-width="3""##
    } else {
        r##"stroke="#d62728" stroke-width="3" stroke-dasharray="6 4""##
    };
    let _ = writeln!(
        s,
        r#"<polyline class="path" points="{}" fill="none" {style}/>"#,
        points.join(" ")
    );
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="{}" font-family="sans-serif" font-size="14">episode {} SPL {:.2}</text>"#,
        hgt - 8,
        h.episode,
        spl
    );
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::envsim::{Action, AudioConfig, DepthConfig, EpisodeConfig, Heading, NavEnv, Signature};
    use crate::nn::module_rng;

    fn episode(actions: &[Action]) -> (EpisodeLog, GridMap) {
        let map = GridMap::bundled("corridor").unwrap();
        let cfg = EpisodeConfig {
            source: Cell::new(6, 1),
            start: Cell::new(1, 1),
            heading: Heading::East,
            signature: Signature::random(16, 3, &mut module_rng(0, "sig")),
            step_limit: 50,
            blind: true,
            seed: 0,
        };
        let mut env = NavEnv::new(Arc::new(map.clone()), cfg, AudioConfig::default(), DepthConfig::default()).unwrap();
        let mut log = EpisodeLog::begin(0, "corridor", None, &env).unwrap();
        for &a in actions {
            let r = env.step(a).unwrap();
            log.push(&env, a, r.reward);
        }
        log.finish().unwrap();
        (log, map)
    }

    fn vertices(svg: &str) -> usize {
        let line = svg.lines().find(|l| l.contains("class=\"path\"")).unwrap();
        let pts = line.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        pts.split(' ').count()
    }

    #[test]
    fn straight_path_has_one_vertex_per_cell() {
        let mut actions = vec![Action::Forward; 5];
        actions.push(Action::Stop);
        let (log, map) = episode(&actions);
        let svg = render_svg(&log, &map).unwrap();
        assert_eq!(vertices(&svg), 6);
        assert!(svg.contains("SPL 1.00"));
        assert!(!svg.contains("stroke-dasharray"));
        assert_eq!(svg, render_svg(&log, &map).unwrap());
    }

    #[test]
    fn failed_episode_is_dashed_with_zero_spl() {
        let (log, map) = episode(&[Action::Forward, Action::Stop]);
        let svg = render_svg(&log, &map).unwrap();
        assert!(svg.contains("stroke-dasharray"));
        assert!(svg.contains("SPL 0.00"));
    }

    #[test]
    fn coordinates_outside_the_map_are_rejected() {
        let (mut log, map) = episode(&[Action::Forward, Action::Stop]);
        log.steps[1].x = 40;
        assert!(matches!(render_svg(&log, &map), Err(Error::DataIntegrity(_))));
    }
}
