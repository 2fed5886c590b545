use serde::{Deserialize, Serialize};

use super::map::{Cell, GridMap};
use super::Heading;
use crate::autodiff::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthConfig {
    /// Image rows; every column repeats one ray.
    pub height: usize,
    /// Number of rays, one per column.
    pub width: usize,
    pub fov_degrees: f64,
    /// Distances at or beyond this read as 1.0.
    pub max_range: f64,
}

impl Default for DepthConfig {
    fn default() -> Self {
        DepthConfig {
            height: 16,
            width: 16,
            fov_degrees: 90.0,
            max_range: 10.0,
        }
    }
}

/// Walk the grid along direction `(dx, dy)` from the centre of `from` and
/// return the offset of the first wall cell, or `None` once every further
/// cell is beyond `max_range`.
fn cast(map: &GridMap, from: Cell, dx: f64, dy: f64, max_range: f64) -> Option<(i64, i64)> {
    let (x0, y0) = (from.x as i64, from.y as i64);
    let (mut cx, mut cy) = (x0, y0);
    let step_x = if dx > 0.0 { 1 } else if dx < 0.0 { -1 } else { 0 };
    let step_y = if dy > 0.0 { 1 } else if dy < 0.0 { -1 } else { 0 };
    let delta_x = if dx == 0.0 { f64::INFINITY } else { 1.0 / dx.abs() };
    let delta_y = if dy == 0.0 { f64::INFINITY } else { 1.0 / dy.abs() };
    let (mut t_x, mut t_y) = (0.5 * delta_x, 0.5 * delta_y);
    let range_sq = (max_range.ceil() as i64 + 2).pow(2);
    let wall = |x: i64, y: i64| map.is_wall_at(x, y);
    let dist_sq = |x: i64, y: i64| (x - x0).pow(2) + (y - y0).pow(2);
    loop {
        if t_x < t_y {
            cx += step_x;
            t_x += delta_x;
        } else if t_y < t_x {
            cy += step_y;
            t_y += delta_y;
        } else {
            // the ray passes exactly through a corner: either side cell
            // blocks it, nearest first
            let sides = [(cx + step_x, cy), (cx, cy + step_y)];
            if let Some(hit) = sides
                .into_iter()
                .filter(|&(x, y)| wall(x, y))
                .min_by_key(|&(x, y)| dist_sq(x, y))
            {
                return Some((hit.0 - x0, hit.1 - y0));
            }
            cx += step_x;
            cy += step_y;
            t_x += delta_x;
            t_y += delta_y;
        }
        if wall(cx, cy) {
            return Some((cx - x0, cy - y0));
        }
        if dist_sq(cx, cy) > range_sq {
            return None;
        }
    }
}

/// `H x W x 1` depth image: column `i` holds the normalised distance from
/// the agent's cell centre to the centre of the first wall cell hit by a ray
/// at angle `fov/2 - (i + 0.5) * fov / W` left of the heading.
pub fn render_depth(map: &GridMap, pos: Cell, heading: Heading, cfg: &DepthConfig) -> Tensor {
    let (fx, fy) = heading.delta();
    let (lx, ly) = heading.turn_left().delta();
    let fov = cfg.fov_degrees.to_radians();
    let columns: Vec<f64> = (0..cfg.width)
        .map(|i| {
            let a = fov / 2.0 - (i as f64 + 0.5) * fov / cfg.width as f64;
            let (c, s) = (a.cos(), a.sin());
            let dx = c * fx as f64 + s * lx as f64;
            let dy = c * fy as f64 + s * ly as f64;
            match cast(map, pos, dx, dy, cfg.max_range) {
                Some((ox, oy)) => {
                    let d = ((ox * ox + oy * oy) as f64).sqrt();
                    (d / cfg.max_range).min(1.0)
                }
                None => 1.0,
            }
        })
        .collect();
    let mut data = Vec::with_capacity(cfg.height * cfg.width);
    for _ in 0..cfg.height {
        data.extend_from_slice(&columns);
    }
    Tensor::new([cfg.height, cfg.width, 1], data).expect("sizes agree")
}
