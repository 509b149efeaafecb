use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::MonitorGraph;
use super::RegionPartition;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Transmission line between two buses, with positive per-unit susceptance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub susceptance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerGrid {
    bus_count: usize,
    branches: Vec<Branch>,
}

impl PowerGrid {
    pub fn new(bus_count: usize, branches: Vec<Branch>) -> Result<Self> {
        for (k, br) in branches.iter().enumerate() {
            if br.from >= bus_count || br.to >= bus_count {
                return Err(Error::Model(format!(
                    "branch {k} joins buses {} and {} but the grid has {bus_count} buses",
                    br.from, br.to
                )));
            }
            if br.from == br.to {
                return Err(Error::Model(format!(
                    "branch {k} is a self-loop at bus {}",
                    br.from
                )));
            }
            if !(br.susceptance.is_finite() && br.susceptance > 0.0) {
                return Err(Error::Model(format!(
                    "branch {k} has non-positive susceptance {}",
                    br.susceptance
                )));
            }
        }
        Ok(Self {
            bus_count,
            branches,
        })
    }

    pub fn bus_count(&self) -> usize {
        self.bus_count
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    /// Weighted Laplacian mapping bus angles to real-power injections.
    pub fn laplacian(&self) -> DenseMatrix {
        let mut l = DMatrix::zeros(self.bus_count, self.bus_count);
        for br in &self.branches {
            let (a, b, s) = (br.from, br.to, br.susceptance);
            l[(a, a)] += s;
            l[(b, b)] += s;
            l[(a, b)] -= s;
            l[(b, a)] -= s;
        }
        l
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![BTreeSet::new(); self.bus_count];
        for br in &self.branches {
            adj[br.from].insert(br.to);
            adj[br.to].insert(br.from);
        }
        adj.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    pub fn is_connected(&self) -> bool {
        if self.bus_count == 0 {
            return false;
        }
        let adj = self.adjacency();
        let mut seen = vec![false; self.bus_count];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Line-oriented text: `buses <n>` followed by `branch <a> <b> <s>` lines.
    pub fn to_text(&self) -> String {
        let mut out = format!("buses {}\n", self.bus_count);
        for br in &self.branches {
            let _ = writeln!(out, "branch {} {} {}", br.from, br.to, br.susceptance);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut bus_count = None;
        let mut branches = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            let parse_err = |message: String| Error::Parse { line, message };
            match fields.as_slice() {
                ["buses", n] => {
                    if bus_count.is_some() {
                        return Err(parse_err("duplicate `buses` header".into()));
                    }
                    bus_count = Some(
                        n.parse::<usize>()
                            .map_err(|_| parse_err(format!("invalid bus count `{n}`")))?,
                    );
                }
                ["branch", a, b, s] => {
                    if bus_count.is_none() {
                        return Err(parse_err("`branch` before `buses` header".into()));
                    }
                    let from = a
                        .parse()
                        .map_err(|_| parse_err(format!("invalid bus index `{a}`")))?;
                    let to = b
                        .parse()
                        .map_err(|_| parse_err(format!("invalid bus index `{b}`")))?;
                    let susceptance: f64 = s
                        .parse()
                        .map_err(|_| parse_err(format!("invalid susceptance `{s}`")))?;
                    branches.push((
                        line,
                        Branch {
                            from,
                            to,
                            susceptance,
                        },
                    ));
                }
                _ => return Err(parse_err(format!("unrecognized line `{content}`"))),
            }
        }
        let bus_count = bus_count.ok_or(Error::Parse {
            line: text.lines().count().max(1),
            message: "missing `buses` header".into(),
        })?;
        for (line, br) in &branches {
            if br.from >= bus_count || br.to >= bus_count || br.from == br.to {
                return Err(Error::Parse {
                    line: *line,
                    message: format!("invalid endpoints {} {}", br.from, br.to),
                });
            }
            if !(br.susceptance.is_finite() && br.susceptance > 0.0) {
                return Err(Error::Parse {
                    line: *line,
                    message: format!("susceptance must be positive, got {}", br.susceptance),
                });
            }
        }
        Self::new(bus_count, branches.into_iter().map(|(_, b)| b).collect())
    }
}

/// Reduced nodal matrix of a connected grid: the Laplacian with the row and
/// column of the reference bus 0 removed, acting on the angles of buses
/// `1..n`. Row `k` is the injection at bus `k + 1`.
pub fn dc_measurement_matrix(grid: &PowerGrid) -> Result<DenseMatrix> {
    if !grid.is_connected() {
        return Err(Error::Model("grid is not connected".into()));
    }
    let n = grid.bus_count();
    let l = grid.laplacian();
    Ok(l.view((1, 1), (n - 1, n - 1)).into_owned())
}

/// Square `(ab) x (ab)` lattice of buses with unit susceptances, split into
/// `b x b` monitors of `a x a` buses each.
///
/// Buses are numbered monitor by monitor: monitor `I = R b + C` owns buses
/// `I a² .. (I+1) a²`, row-major inside its square. Bus 0 (a corner of
/// monitor 0) is the reference, so state and row index `k` refer to bus
/// `k + 1`.
pub fn lattice_grid(a: usize, b: usize) -> Result<(PowerGrid, RegionPartition, MonitorGraph)> {
    if a == 0 || b == 0 {
        return Err(Error::Model("lattice dimensions must be positive".into()));
    }
    let side = a * b;
    let bus_of = |row: usize, col: usize| {
        let monitor = (row / a) * b + col / a;
        monitor * a * a + (row % a) * a + col % a
    };
    let mut branches = Vec::new();
    for row in 0..side {
        for col in 0..side {
            if col + 1 < side {
                branches.push(Branch {
                    from: bus_of(row, col),
                    to: bus_of(row, col + 1),
                    susceptance: 1.0,
                });
            }
            if row + 1 < side {
                branches.push(Branch {
                    from: bus_of(row, col),
                    to: bus_of(row + 1, col),
                    susceptance: 1.0,
                });
            }
        }
    }
    let grid = PowerGrid::new(side * side, branches)?;
    let areas: Vec<Vec<usize>> = (0..b * b)
        .map(|m| (m * a * a..(m + 1) * a * a).collect())
        .collect();
    let partition = RegionPartition::from_bus_areas(&areas, 1);
    Ok((grid, partition, MonitorGraph::lattice(b)?))
}

/// Connected grid with `areas` contiguous bus ranges: a random spanning tree
/// inside each area, one tie line between consecutive areas, then random
/// extra branches up to `branches` in total. Susceptances are uniform in
/// `[5, 20]`. Returns the grid and the bus list of each area.
pub fn synthetic_grid(
    buses: usize,
    branches: usize,
    areas: usize,
    seed: u64,
) -> Result<(PowerGrid, Vec<Vec<usize>>)> {
    if areas == 0 || buses < 2 * areas {
        return Err(Error::Model(format!(
            "cannot split {buses} buses into {areas} areas of at least two buses"
        )));
    }
    if branches + 1 < buses {
        return Err(Error::Model(format!(
            "{branches} branches cannot connect {buses} buses"
        )));
    }
    let max_edges = buses * (buses - 1) / 2;
    if branches > max_edges {
        return Err(Error::Model(format!(
            "{branches} branches exceed the {max_edges} possible bus pairs"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = buses / areas;
    let extra = buses % areas;
    let mut area_buses = Vec::with_capacity(areas);
    let mut start = 0;
    for k in 0..areas {
        let len = base + usize::from(k < extra);
        area_buses.push((start..start + len).collect::<Vec<_>>());
        start += len;
    }

    let mut pairs = BTreeSet::new();
    let add = |a: usize, b: usize, pairs: &mut BTreeSet<(usize, usize)>| {
        pairs.insert((a.min(b), a.max(b)))
    };
    for area in &area_buses {
        let mut order = area.clone();
        order.shuffle(&mut rng);
        for k in 1..order.len() {
            let parent = order[rng.random_range(0..k)];
            add(order[k], parent, &mut pairs);
        }
    }
    for k in 1..areas {
        let a = area_buses[k - 1][rng.random_range(0..area_buses[k - 1].len())];
        let b = area_buses[k][rng.random_range(0..area_buses[k].len())];
        add(a, b, &mut pairs);
    }
    // Extra branches stay mostly inside areas, as in a real interconnection.
    let area_of: Vec<usize> = area_buses
        .iter()
        .enumerate()
        .flat_map(|(k, bs)| bs.iter().map(move |_| k))
        .collect();
    while pairs.len() < branches {
        let a = rng.random_range(0..buses);
        let b = rng.random_range(0..buses);
        if a == b {
            continue;
        }
        if area_of[a] != area_of[b] && rng.random_range(0.0..1.0) < 0.7 {
            continue;
        }
        add(a, b, &mut pairs);
    }
    let list = pairs
        .into_iter()
        .map(|(from, to)| Branch {
            from,
            to,
            susceptance: rng.random_range(5.0..20.0),
        })
        .collect();
    Ok((PowerGrid::new(buses, list)?, area_buses))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle() -> PowerGrid {
        let br = |from, to| Branch {
            from,
            to,
            susceptance: 1.0,
        };
        PowerGrid::new(3, vec![br(0, 1), br(1, 2), br(0, 2)]).unwrap()
    }

    #[test]
    fn two_bus_measurement_matrix() {
        let g = PowerGrid::new(
            2,
            vec![Branch {
                from: 0,
                to: 1,
                susceptance: 1.0,
            }],
        )
        .unwrap();
        let h = dc_measurement_matrix(&g).unwrap();
        assert_eq!(h, DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn triangle_laplacian_by_hand() {
        let l = triangle().laplacian();
        let expected =
            DMatrix::from_row_slice(3, 3, &[2.0, -1.0, -1.0, -1.0, 2.0, -1.0, -1.0, -1.0, 2.0]);
        assert_eq!(l, expected);
        for r in l.row_iter() {
            assert_eq!(r.sum(), 0.0);
        }
    }

    #[test]
    fn disconnected_grid_is_rejected() {
        let g = PowerGrid::new(
            3,
            vec![Branch {
                from: 0,
                to: 1,
                susceptance: 1.0,
            }],
        )
        .unwrap();
        assert!(matches!(dc_measurement_matrix(&g), Err(Error::Model(_))));
    }

    #[test]
    fn invalid_branches_are_rejected() {
        let bad = |from, to, susceptance| {
            PowerGrid::new(
                3,
                vec![Branch {
                    from,
                    to,
                    susceptance,
                }],
            )
        };
        assert!(bad(0, 3, 1.0).is_err());
        assert!(bad(1, 1, 1.0).is_err());
        assert!(bad(0, 1, 0.0).is_err());
        assert!(bad(0, 1, f64::NAN).is_err());
    }

    #[test]
    fn text_round_trip_is_exact() {
        let (g, _) = synthetic_grid(30, 45, 3, 5).unwrap();
        let back = PowerGrid::from_text(&g.to_text()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = PowerGrid::from_text("buses 3\nbranch 0 1 1.0\nbranch 0 x 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
        let err = PowerGrid::from_text("# c\nbranch 0 1 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = PowerGrid::from_text("buses 2\nbranch 0 1 -1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn lattice_dimensions() {
        let (g, p, mg) = lattice_grid(5, 4).unwrap();
        assert_eq!(g.bus_count(), 400);
        assert_eq!(p.monitor_count(), 16);
        assert_eq!(mg.monitor_count(), 16);
        assert_eq!(mg.diameter(), 6);
        assert_eq!(g.branches().len(), 2 * 20 * 19);

        let (g, p, mg) = lattice_grid(1, 2).unwrap();
        assert_eq!(g.bus_count(), 4);
        assert_eq!(p.monitor_count(), 4);
        assert_eq!(mg.diameter(), 2);

        assert_eq!(lattice_grid(3, 3).unwrap().2.diameter(), 4);
    }

    #[test]
    fn synthetic_grid_matches_requested_size() {
        let (g, areas) = synthetic_grid(118, 186, 5, 1).unwrap();
        assert_eq!(g.bus_count(), 118);
        assert_eq!(g.branches().len(), 186);
        assert!(g.is_connected());
        assert_eq!(areas.iter().map(Vec::len).sum::<usize>(), 118);
        assert_eq!(synthetic_grid(118, 186, 5, 1).unwrap().0, g);
    }
}
