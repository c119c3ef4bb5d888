use std::sync::Arc;
use thinfilm::evolution::{self, Scheme, Source};
use thinfilm::grid::{Field, Grid};

fn wide_grid(m: usize, x_max: f64) -> Arc<Grid> {
    Grid::new(1, m, x_max, 2.0, 1, 1.0).unwrap()
}

fn bump(grid: &Arc<Grid>, c: f64, w: f64) -> Field {
    use thinfilm::grid::{QuadratureDegree, WeightSpec};
    let mut g = Field::from_fn(grid.clone(), |x| {
        let r2 = (x[0] - c) * (x[0] - c) / (w * w);
        let s = 1.0 - r2;
        if s <= 0.0 { 0.0 } else { s * s * s }
    });
    let leb = grid.measure_weights(WeightSpec::new(0.0).unwrap(), QuadratureDegree::Linear);
    let mass: f64 = leb.iter().zip(g.values()).map(|(w, v)| w * v).sum();
    for v in g.values_mut() {
        *v /= mass;
    }
    g
}

fn main() {
    // Width-memory test: same source, widths w and w/2, both schemes, two
    // resolutions. Print sup-relative final gap.
    for m in [256usize, 512] {
        for scheme in [Scheme::ImplicitMidpoint, Scheme::ImplicitEuler] {
            let grid = wide_grid(m, 32.0);
            let w = 0.25;
            let g1 = bump(&grid, w, w);
            let g2 = bump(&grid, w, w / 2.0);
            let t1 = evolution::solve_linear(&grid, scheme, &g1, Source::None, 0.5, 2e-3, 1000).unwrap();
            let t2 = evolution::solve_linear(&grid, scheme, &g2, Source::None, 0.5, 2e-3, 1000).unwrap();
            let ua = t1.states.last().unwrap().values();
            let ub = t2.states.last().unwrap().values();
            let sup = ua.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let gap = ua
                .iter()
                .zip(ub)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            let argmax = ua
                .iter()
                .zip(ub)
                .enumerate()
                .max_by(|x, y| (x.1 .0 - x.1 .1).abs().total_cmp(&(y.1 .0 - y.1 .1).abs()))
                .unwrap()
                .0;
            println!(
                "M={m} {scheme:?}: gap={:.4} at x={:.4}",
                gap / sup,
                grid.coords_flat(argmax)[0]
            );
        }
    }
}
