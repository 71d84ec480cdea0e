use crate::chem::MolGraph;

const ITERATIONS: usize = 600;

/// Ring-aware force layout for display. Bonds pull toward unit length,
/// ring members toward the chords of a regular polygon, and all pairs
/// repel at short range. Deterministic for a given graph.
pub fn layout_2d(g: &MolGraph) -> Vec<(f64, f64)> {
    let n = g.num_atoms();
    // Golden-angle spiral start.
    let mut pos: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let r = (i as f64 + 0.5).sqrt();
            let a = i as f64 * 2.399_963;
            (r * a.cos(), r * a.sin())
        })
        .collect();
    let mut springs: Vec<(usize, usize, f64)> = g.bonds.iter().map(|b| (b.a, b.b, 1.0)).collect();
    for ring in &g.rings {
        let k = ring.len();
        let radius = 1.0 / (2.0 * (std::f64::consts::PI / k as f64).sin());
        for i in 0..k {
            for j in i + 2..k {
                if i == 0 && j == k - 1 {
                    continue;
                }
                let gap = (j - i).min(k - (j - i)) as f64;
                let chord = 2.0 * radius * (std::f64::consts::PI * gap / k as f64).sin();
                springs.push((ring[i], ring[j], chord));
            }
        }
    }
    for it in 0..ITERATIONS {
        let step = 0.1 * (1.0 - it as f64 / ITERATIONS as f64) + 0.005;
        let mut force = vec![(0.0, 0.0); n];
        for i in 0..n {
            for j in i + 1..n {
                let (dx, dy) = (pos[i].0 - pos[j].0, pos[i].1 - pos[j].1);
                let d2 = (dx * dx + dy * dy).max(1e-4);
                if d2 < 9.0 {
                    let f = 0.12 / d2;
                    force[i].0 += f * dx;
                    force[i].1 += f * dy;
                    force[j].0 -= f * dx;
                    force[j].1 -= f * dy;
                }
            }
        }
        for &(a, b, len) in &springs {
            let (dx, dy) = (pos[b].0 - pos[a].0, pos[b].1 - pos[a].1);
            let d = (dx * dx + dy * dy).sqrt().max(1e-6);
            let f = (d - len) / d;
            force[a].0 += f * dx;
            force[a].1 += f * dy;
            force[b].0 -= f * dx;
            force[b].1 -= f * dy;
        }
        for (p, f) in pos.iter_mut().zip(&force) {
            p.0 += step * f.0.clamp(-2.0, 2.0);
            p.1 += step * f.1.clamp(-2.0, 2.0);
        }
    }
    pos
}
