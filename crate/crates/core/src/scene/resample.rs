use crate::tensor::Tensor;

/// Overlap of pixel `[i, i+1)` with each of `cells` equal intervals tiling
/// `[0, n)`, as a `cells × n` row-major weight table.
fn overlap_weights(n: usize, cells: usize) -> Vec<f64> {
    let step = n as f64 / cells as f64;
    let mut weights = vec![0.0; cells * n];
    for cell in 0..cells {
        let (lo, hi) = (cell as f64 * step, (cell + 1) as f64 * step);
        for i in (lo.floor() as usize)..(hi.ceil() as usize).min(n) {
            let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
            weights[cell * n + i] = overlap;
        }
    }
    weights
}

/// Area-average pooling of an `H×W` map onto a `p×q` grid of equal cells.
pub fn downsample_mask(mask: &Tensor, p: usize, q: usize) -> Tensor {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    assert!(p >= 1 && q >= 1 && p <= h && q <= w, "cannot pool {h}×{w} onto {p}×{q}");
    let wy = overlap_weights(h, p);
    let wx = overlap_weights(w, q);
    let cell_area = (h as f64 / p as f64) * (w as f64 / q as f64);
    let data = mask.data();
    let mut out = vec![0.0; p * q];
    for i in 0..p {
        for j in 0..q {
            let mut acc = 0.0;
            for r in 0..h {
                let a = wy[i * h + r];
                if a == 0.0 {
                    continue;
                }
                let row = &data[r * w..(r + 1) * w];
                let inner: f64 = row.iter().zip(&wx[j * w..(j + 1) * w]).map(|(v, b)| v * b).sum();
                acc += a * inner;
            }
            out[i * q + j] = acc / cell_area;
        }
    }
    Tensor::plain(vec![p, q], out)
}

/// Bilinear resize of a `p×q` map to `h×w` with pixel-centre alignment and
/// edge clamping. Not differentiable; for display and evaluation only.
pub fn upsample_bilinear(map: &Tensor, h: usize, w: usize) -> Tensor {
    let (p, q) = (map.shape()[0], map.shape()[1]);
    let data = map.data();
    let coord = |o: usize, out: usize, src: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let (y0, y1, fy) = coord(r, h, p);
        for c in 0..w {
            let (x0, x1, fx) = coord(c, w, q);
            let top = data[y0 * q + x0] * (1.0 - fx) + data[y0 * q + x1] * fx;
            let bottom = data[y1 * q + x0] * (1.0 - fx) + data[y1 * q + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::plain(vec![h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_mask_stays_constant() {
        let d = downsample_mask(&Tensor::full(&[7, 5], 0.25), 3, 2);
        assert!(d.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn quadrant_pattern() {
        let m = Tensor::new(
            &[4, 4],
            vec![1., 1., 0., 0., 1., 1., 0., 0., 0., 0., 1., 1., 0., 0., 1., 1.],
        )
        .unwrap();
        assert_eq!(downsample_mask(&m, 2, 2).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn mean_is_conserved_on_dividing_grids() {
        let data: Vec<f64> = (0..32 * 32).map(|i| ((i * 7919) % 13 == 0) as u8 as f64).collect();
        let m = Tensor::new(&[32, 32], data).unwrap();
        let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.len() as f64;
        for g in [1, 2, 4, 8, 16, 32] {
            assert!((mean(&downsample_mask(&m, g, g)) - mean(&m)).abs() < 1e-15);
        }
    }

    #[test]
    fn fractional_cells_weight_by_area() {
        // 3 pixels onto 2 cells: cell 0 = px0 + half px1.
        let m = Tensor::new(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let d = downsample_mask(&m, 1, 2);
        assert!((d.data()[0] - 1.0 / 1.5).abs() < 1e-15);
        assert_eq!(d.data()[1], 0.0);
    }

    #[test]
    fn bilinear_bounds_and_constants() {
        let m = Tensor::new(&[2, 2], vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let up = upsample_bilinear(&m, 32, 32);
        assert!(up.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(up.data()[0], 0.0);
        assert_eq!(up.data()[31], 1.0);
        let flat = upsample_bilinear(&Tensor::full(&[2, 2], 0.3), 8, 8);
        assert!(flat.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
        assert_eq!(upsample_bilinear(&m, 2, 2), m);
    }
}
