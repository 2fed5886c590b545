use std::collections::VecDeque;

use super::map::{Cell, GridMap};
use super::{Action, Heading};
use crate::error::{Error, Result};

/// BFS distances (in cells, 4-connected) from every free cell to one target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistanceField {
    width: usize,
    target: Cell,
    dist: Vec<Option<u32>>,
}

impl DistanceField {
    pub fn new(map: &GridMap, target: Cell) -> Result<Self> {
        if map.is_wall(target) {
            return Err(Error::Contract(format!("target {target} is a wall")));
        }
        let mut dist = vec![None; map.width() * map.height()];
        dist[map.index(target)] = Some(0);
        let mut queue = VecDeque::from([target]);
        while let Some(c) = queue.pop_front() {
            let d = dist[map.index(c)].expect("queued cells have a distance");
            for n in map.free_neighbors(c) {
                let slot = &mut dist[map.index(n)];
                if slot.is_none() {
                    *slot = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        Ok(DistanceField {
            width: map.width(),
            target,
            dist,
        })
    }

    pub fn target(&self) -> Cell {
        self.target
    }

    /// `None` for walls and cells disconnected from the target.
    pub fn get(&self, c: Cell) -> Option<u32> {
        self.dist.get(c.y * self.width + c.x).copied().flatten()
    }
}

/// Shortest 4-connected path length between two free cells, or `None` when
/// they are disconnected.
pub fn geodesic_distance(map: &GridMap, from: Cell, to: Cell) -> Result<Option<u32>> {
    if map.is_wall(from) {
        return Err(Error::Contract(format!("start {from} is a wall")));
    }
    Ok(DistanceField::new(map, to)?.get(from))
}

/// Fewest actions that reach `target` from `start` facing `heading` and then
/// stop there (the final Stop included). `None` when unreachable.
pub fn min_actions(map: &GridMap, start: Cell, heading: Heading, target: Cell) -> Result<Option<u32>> {
    if map.is_wall(start) || map.is_wall(target) {
        return Err(Error::Contract("min_actions needs free cells".into()));
    }
    let idx = |c: Cell, h: Heading| map.index(c) * 4 + h.index();
    let mut seen = vec![false; map.width() * map.height() * 4];
    let mut queue = VecDeque::from([(start, heading, 0u32)]);
    seen[idx(start, heading)] = true;
    while let Some((c, h, n)) = queue.pop_front() {
        if c == target {
            return Ok(Some(n + 1));
        }
        for action in [Action::Forward, Action::TurnLeft, Action::TurnRight] {
            let (nc, nh) = match action {
                Action::Forward => (h.advance(map, c).unwrap_or(c), h),
                Action::TurnLeft => (c, h.turn_left()),
                _ => (c, h.turn_right()),
            };
            if !seen[idx(nc, nh)] {
                seen[idx(nc, nh)] = true;
                queue.push_back((nc, nh, n + 1));
            }
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;

    use rand::Rng;

    use super::*;
    use crate::nn::module_rng;

    /// Unit-weight Dijkstra over an explicit adjacency list.
    fn dijkstra(map: &GridMap, from: Cell, to: Cell) -> Option<u32> {
        let n = map.width() * map.height();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for y in 0..map.height() {
            for x in 0..map.width() {
                let c = Cell::new(x, y);
                if map.is_wall(c) {
                    continue;
                }
                for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if !map.is_wall_at(nx, ny) {
                        adj[map.index(c)].push(ny as usize * map.width() + nx as usize);
                    }
                }
            }
        }
        let mut best = vec![u32::MAX; n];
        let mut heap = BinaryHeap::new();
        best[map.index(from)] = 0;
        heap.push(Reverse((0u32, map.index(from))));
        while let Some(Reverse((d, u))) = heap.pop() {
            if d > best[u] {
                continue;
            }
            for &v in &adj[u] {
                if d + 1 < best[v] {
                    best[v] = d + 1;
                    heap.push(Reverse((d + 1, v)));
                }
            }
        }
        let d = best[map.index(to)];
        (d != u32::MAX).then_some(d)
    }

    #[test]
    fn straight_corridor() {
        let map = GridMap::parse("#######\n#.....#\n#######\n").unwrap();
        let d = geodesic_distance(&map, Cell::new(1, 1), Cell::new(5, 1)).unwrap();
        assert_eq!(d, Some(4));
        let long = GridMap::bundled("corridor").unwrap();
        let d = geodesic_distance(&long, Cell::new(1, 1), Cell::new(6, 1)).unwrap();
        assert_eq!(d, Some(5));
    }

    #[test]
    fn walled_off_source_is_unreachable() {
        let map = GridMap::parse("#######\n#..#..#\n#######\n").unwrap();
        assert_eq!(geodesic_distance(&map, Cell::new(1, 1), Cell::new(5, 1)).unwrap(), None);
        assert!(matches!(
            geodesic_distance(&map, Cell::new(3, 1), Cell::new(5, 1)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn bfs_matches_dijkstra_and_triangle_inequality() {
        let mut rng = module_rng(0, "geodesic");
        for _ in 0..100 {
            let map = GridMap::random(12, 12, 0.3, &mut rng).unwrap();
            let free = map.free_cells();
            for _ in 0..10 {
                let a = free[rng.gen_range(0..free.len())];
                let b = free[rng.gen_range(0..free.len())];
                let c = free[rng.gen_range(0..free.len())];
                let ab = geodesic_distance(&map, a, b).unwrap();
                assert_eq!(ab, dijkstra(&map, a, b));
                let bc = geodesic_distance(&map, b, c).unwrap();
                let ac = geodesic_distance(&map, a, c).unwrap();
                if let (Some(ab), Some(bc), Some(ac)) = (ab, bc, ac) {
                    assert!(ac <= ab + bc);
                }
            }
        }
    }

    #[test]
    fn min_actions_counts_turns_and_stop() {
        let map = GridMap::bundled("room8").unwrap();
        let c = Cell::new(3, 3);
        assert_eq!(min_actions(&map, c, Heading::North, c).unwrap(), Some(1));
        // two ahead: Forward, Forward, Stop
        assert_eq!(min_actions(&map, c, Heading::North, Cell::new(3, 1)).unwrap(), Some(3));
        // behind: two turns first
        assert_eq!(min_actions(&map, c, Heading::North, Cell::new(3, 4)).unwrap(), Some(4));
        // diagonal: one turn
        assert_eq!(min_actions(&map, c, Heading::North, Cell::new(4, 2)).unwrap(), Some(4));
    }
}
