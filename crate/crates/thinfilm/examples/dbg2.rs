use std::sync::Arc;
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

    // Where does the boundary width gap live?
    let w = 0.25;
    let p1 = probe_kernel(&grid, &[w], w, t, tau, 10).unwrap();
    let p2 = probe_kernel(&grid, &[w], w / 2.0, t, tau, 10).unwrap();
    let mut worst = (0.0f64, 0usize);
    let mut scale = 0.0f64;
    for (sa, sb) in p1.samples.iter().zip(&p2.samples) {
        scale = scale.max(sa.normalized).max(sb.normalized);
        let g = (sa.normalized - sb.normalized).abs();
        if g > worst.0 {
            worst = (g, sa.flat);
        }
    }
    let x = grid.coords_flat(worst.1)[0];
    println!(
        "boundary width gap: {:.4} at node {} (x={:.4}, rho={:.3})",
        worst.0 / scale,
        worst.1,
        x,
        grid.periodic_rho(&[x], &[w])
    );
    for flat in [0usize, 2, 4, 8, 16, 32, 64, 96, 128] {
        let sa = &p1.samples[flat];
        let sb = &p2.samples[flat];
        println!(
            "  x={:8.4} rho={:6.3}  v1={:10.3e} v2={:10.3e} raw1={:10.3e} raw2={:10.3e}",
            grid.coords_flat(flat)[0],
            sa.rho,
            sa.normalized,
            sb.normalized,
            sa.raw,
            sb.raw
        );
    }

    // Polynomial domination sup across domain sizes (same spacing density).
    for (mm, xm) in [(256usize, 32.0f64), (362, 64.0)] {
        let g = wide_grid(mm, xm);
        let p = probe_kernel(&g, &[0.25], 0.25, t, tau, 10).unwrap();
        let floor = p.noise_floor();
        let scale = p.time.powf(0.25);
        let mut sup = 0.0f64;
        let mut arg = 0.0;
        for s in &p.samples {
            if s.normalized > floor {
                let v = s.normalized * (1.0 + s.rho / scale).powi(10);
                if v > sup {
                    sup = v;
                    arg = s.rho / scale;
                }
            }
        }
        println!("poly sup x_max={xm}: {sup:.4e} at rho-hat {arg:.2}");
    }

    // Lq dichotomy with width tied to the boundary divergence window.
    let wq = 0.04;
    for tauq in [1.6e-3, 4e-4, 1e-4] {
        let p = probe_kernel(&grid, &[wq], wq, 0.05, tauq, 1).unwrap();
        let i1 = kernel_lq_norm(&p, 0, &[1], 1.0).unwrap();
        let i2 = kernel_lq_norm(&p, 0, &[1], 2.0).unwrap();
        println!("Lq w={wq} tau={tauq:.1e}: q=1 -> {:.6e}  q=2 -> {:.6e}", i1.value, i2.value);
    }
}
