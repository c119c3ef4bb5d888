use std::sync::Arc;
use thinfilm::evolution::Scheme;
use thinfilm::greenlab::*;
use thinfilm::grid::Grid;

fn wide_grid(m: usize, x_max: f64) -> Arc<Grid> {
    Grid::new(1, m, x_max, 2.0, 1, 1.0).unwrap()
}

fn main() {
    let m = 256;
    let grid = wide_grid(m, 32.0);
    let t = 0.5;
    let tau = 2e-3;
    let eu = Scheme::ImplicitEuler;

    let wb = 0.25;
    let pb = probe_kernel(&grid, &[wb], wb, eu, t, tau, 5).unwrap();
    let pi = probe_kernel(&grid, &[4.0], 1.5, eu, t, tau, 5).unwrap();
    for (name, p) in [("boundary", &pb), ("interior", &pi)] {
        let fit = fit_envelope(p).unwrap();
        println!(
            "{name}: a={:.3} b={:.3} q={:.3} r2={:.4} used={}",
            fit.amplitude, fit.rate, fit.exponent, fit.r_squared, fit.used
        );
        let ks = [
            p.trajectory.times.len() / 4,
            p.trajectory.times.len() / 2,
            p.trajectory.times.len() - 1,
        ];
        let corr = collapse_correlation(p, &ks).unwrap();
        let (sup, at) = polynomial_domination(p, 10).unwrap();
        println!("  collapse corr = {corr:.4}; poly sup {sup:.4e} at rho-hat {at:.2}");
    }

    // Width consistency, both kinds.
    let pb2 = probe_kernel(&grid, &[wb], wb / 2.0, eu, t, tau, 5).unwrap();
    println!("width gap boundary = {:.4}", width_consistency(&pb, &pb2).unwrap());
    let pi2 = probe_kernel(&grid, &[4.0], 0.75, eu, t, tau, 5).unwrap();
    println!("width gap interior = {:.4}", width_consistency(&pi, &pi2).unwrap());

    // Poly-domination domain stability.
    let gw = wide_grid(362, 64.0);
    let pw = probe_kernel(&gw, &[wb], wb, eu, t, tau, 5).unwrap();
    let (s32, a32) = polynomial_domination(&pb, 10).unwrap();
    let (s64, a64) = polynomial_domination(&pw, 10).unwrap();
    println!("poly sup 32 -> 64: {s32:.4e}@{a32:.2} -> {s64:.4e}@{a64:.2} ratio {:.3}", s64 / s32);

    // Symmetry proxy.
    let pa = probe_kernel(&grid, &[2.0], 0.6, eu, t, tau, 50).unwrap();
    let pc = probe_kernel(&grid, &[5.0], 0.6, eu, t, tau, 50).unwrap();
    println!("symmetry gap (2 <-> 5) = {:.5}", symmetry_gap(&pa, &pc).unwrap());

    // Exterior decay.
    let fitb = fit_envelope(&pb).unwrap();
    for center in [10.0, 16.0, 24.0] {
        let r = exterior_decay_check(&pb, &[center], 0, &[1], fitb.rate).unwrap();
        let sep = grid.periodic_rho(&[wb], &[center]);
        println!("exterior ratio center={center} (sep {sep:.2}) = {r:.4e}");
    }

    // Arrival profile at x = 4.
    let target = 4.0;
    let flat = (0..grid.len())
        .min_by(|&a, &b| {
            (grid.coords_flat(a)[0] - target)
                .abs()
                .total_cmp(&(grid.coords_flat(b)[0] - target).abs())
        })
        .unwrap();
    let series: Vec<f64> = pb.trajectory.states.iter().map(|u| u.values()[flat].abs()).collect();
    let maxpos = series
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    println!(
        "arrival at x=4: argmax {maxpos}/{} (rise {:.3e} peak {:.3e} end {:.3e})",
        series.len() - 1,
        series[1],
        series[maxpos],
        series.last().unwrap()
    );

    // Lq dichotomy ladder: width/height and step tied to the grid.
    for mm in [192usize, 256, 384, 512] {
        let g = wide_grid(mm, 32.0);
        let w = 160.0 * 32.0 / (mm as f64 * mm as f64);
        let tau = w * w / 8.0;
        let p = probe_kernel(&g, &[w], w, eu, 0.05, tau, 1).unwrap();
        let i1 = kernel_lq_norm(&p, 0, &[1], 1.0).unwrap();
        let i2 = kernel_lq_norm(&p, 0, &[1], 2.0).unwrap();
        println!(
            "Lq M={mm} w={w:.4} tau={tau:.2e}: q=1 -> {:.5e}  q=2 -> {:.5e}",
            i1.value, i2.value
        );
    }
}
