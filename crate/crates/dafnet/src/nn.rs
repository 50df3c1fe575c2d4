//! Spatial network operations on the tape: zero-padded "same" convolution,
//! 2x2 max pooling, area-average down-sampling and bilinear up-sampling.
//!
//! Convolution runs as im2col + GEMM; the column matrix is rebuilt in the
//! backward pass instead of cached, trading a little compute for memory.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::scalar::Scalar;
use crate::tape::{as1, as3, reshaped, Tape, Value, Var};

/// `x: [c_in, h, w]`, `w: [c_out, c_in, kh, kw]`, `b: [c_out]`.
/// Stride 1, zero padding `kh/2, kw/2`, so the spatial size is preserved.
pub fn conv2d<F: Scalar>(tape: &mut Tape<F>, x: Var, w: Var, b: Var) -> Var {
    let xv = as3(tape.value(x));
    let (c_in, h, wdt) = xv.dim();
    let wshape: Vec<usize> = tape.shape(w).to_vec();
    assert_eq!(wshape.len(), 4, "conv2d: weight must be rank 4");
    let (c_out, wc_in, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    assert_eq!(
        wc_in, c_in,
        "conv2d: weight expects {wc_in} input channels, feature has {c_in}"
    );
    assert_eq!(tape.shape(b), [c_out], "conv2d: bias length");

    let col = im2col(&xv, kh, kw);
    let w_mat = mat_view(tape.value(w), c_out, c_in * kh * kw);
    let mut y = w_mat.dot(&col); // [c_out, h*w]
    {
        let bv = as1(tape.value(b));
        for o in 0..c_out {
            let bo = bv[o];
            y.row_mut(o).mapv_inplace(|v| v + bo);
        }
    }
    let value = reshaped(y, &[c_out, h, wdt]);

    let needs = tape.any_needs(&[x, w, b]);
    tape.push(
        value,
        needs,
        Some(Box::new(move |vals, g, gb| {
            let gv = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let (c_out, h, wdt) = gv.dim();
            // gradients are not guaranteed standard layout; copy into one
            let g_mat =
                Array2::from_shape_vec((c_out, h * wdt), gv.iter().copied().collect()).unwrap();
            if gb.wants(b) {
                let db: ndarray::Array1<F> = (0..c_out)
                    .map(|o| g_mat.row(o).iter().copied().sum())
                    .collect();
                gb.add(b, db.into_dyn());
            }
            if gb.wants(w) {
                let xv = as3(&vals[x.0]);
                let col = im2col(&xv, kh, kw);
                let dw = g_mat.dot(&col.t());
                gb.add(w, reshaped(dw, &[c_out, c_in, kh, kw]));
            }
            if gb.wants(x) {
                let w_mat = mat_view(&vals[w.0], c_out, c_in * kh * kw);
                let dcol = w_mat.t().dot(&g_mat); // [c_in*kh*kw, h*w]
                let dx = col2im::<F>(&dcol.view(), c_in, h, wdt, kh, kw);
                gb.add(x, dx.into_dyn());
            }
        })),
    )
}

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped;
/// an axis of size 1 passes through unchanged, so deep stages of very
/// small inputs stay usable.
pub fn maxpool2<F: Scalar>(tape: &mut Tape<F>, x: Var) -> Var {
    let xv = as3(tape.value(x));
    let (c, h, w) = xv.dim();
    let oh = (h / 2).max(1);
    let ow = (w / 2).max(1);
    let mut out = Array3::<F>::zeros((c, oh, ow));
    let mut arg = vec![0usize; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let r0 = (2 * oy).min(h - 1);
                let c0 = (2 * ox).min(w - 1);
                let r1 = (r0 + 2).min(h);
                let c1 = (c0 + 2).min(w);
                let mut best = xv[[ch, r0, c0]];
                let mut best_at = r0 * w + c0;
                for r in r0..r1 {
                    for cc in c0..c1 {
                        if xv[[ch, r, cc]] > best {
                            best = xv[[ch, r, cc]];
                            best_at = r * w + cc;
                        }
                    }
                }
                out[[ch, oy, ox]] = best;
                arg[(ch * oh + oy) * ow + ox] = best_at;
            }
        }
    }
    let needs = tape.needs(x);
    tape.push(
        out.into_dyn(),
        needs,
        Some(Box::new(move |_vals, g, gb| {
            if !gb.wants(x) {
                return;
            }
            let gv = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let (c, oh, ow) = gv.dim();
            let mut dx = Array3::<F>::zeros((c, h, w));
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let flat = arg[(ch * oh + oy) * ow + ox];
                        dx[[ch, flat / w, flat % w]] += gv[[ch, oy, ox]];
                    }
                }
            }
            gb.add(x, dx.into_dyn());
        })),
    )
}

/// Block-mean down-sampling by integer factors. Used to shrink attention
/// maps, where max pooling would bias the density toward 1.
pub fn area_downsample<F: Scalar>(tape: &mut Tape<F>, x: Var, fy: usize, fx: usize) -> Var {
    assert!(fy >= 1 && fx >= 1);
    let xv = as3(tape.value(x));
    let (c, h, w) = xv.dim();
    assert_eq!(h % fy, 0, "area_downsample: {h} not divisible by {fy}");
    assert_eq!(w % fx, 0, "area_downsample: {w} not divisible by {fx}");
    let (oh, ow) = (h / fy, w / fx);
    let inv = F::from_f64(1.0 / (fy * fx) as f64);
    let mut out = Array3::<F>::zeros((c, oh, ow));
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = F::zero();
                for r in oy * fy..(oy + 1) * fy {
                    for cc in ox * fx..(ox + 1) * fx {
                        acc += xv[[ch, r, cc]];
                    }
                }
                out[[ch, oy, ox]] = acc * inv;
            }
        }
    }
    let needs = tape.needs(x);
    tape.push(
        out.into_dyn(),
        needs,
        Some(Box::new(move |_vals, g, gb| {
            if !gb.wants(x) {
                return;
            }
            let gv = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let (c, oh, ow) = gv.dim();
            let mut dx = Array3::<F>::zeros((c, h, w));
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gshare = gv[[ch, oy, ox]] * inv;
                        for r in oy * fy..(oy + 1) * fy {
                            for cc in ox * fx..(ox + 1) * fx {
                                dx[[ch, r, cc]] = gshare;
                            }
                        }
                    }
                }
            }
            gb.add(x, dx.into_dyn());
        })),
    )
}

/// Bilinear resize to an explicit target size, align-corners off
/// (source coordinate `(i + 0.5) * h / oh - 0.5`, clamped).
pub fn upsample_bilinear<F: Scalar>(tape: &mut Tape<F>, x: Var, oh: usize, ow: usize) -> Var {
    let xv = as3(tape.value(x));
    let (c, h, w) = xv.dim();
    let ys = axis_weights::<F>(h, oh);
    let xs = axis_weights::<F>(w, ow);
    let mut out = Array3::<F>::zeros((c, oh, ow));
    for ch in 0..c {
        for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                out[[ch, oy, ox]] = xv[[ch, y0, x0]] * wy0 * wx0
                    + xv[[ch, y0, x1]] * wy0 * wx1
                    + xv[[ch, y1, x0]] * wy1 * wx0
                    + xv[[ch, y1, x1]] * wy1 * wx1;
            }
        }
    }
    let needs = tape.needs(x);
    tape.push(
        out.into_dyn(),
        needs,
        Some(Box::new(move |_vals, g, gb| {
            if !gb.wants(x) {
                return;
            }
            let gv = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let c = gv.dim().0;
            let mut dx = Array3::<F>::zeros((c, h, w));
            for ch in 0..c {
                for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                        let go = gv[[ch, oy, ox]];
                        dx[[ch, y0, x0]] += go * wy0 * wx0;
                        dx[[ch, y0, x1]] += go * wy0 * wx1;
                        dx[[ch, y1, x0]] += go * wy1 * wx0;
                        dx[[ch, y1, x1]] += go * wy1 * wx1;
                    }
                }
            }
            gb.add(x, dx.into_dyn());
        })),
    )
}

/// Per-output-index source pair and interpolation weights for one axis.
fn axis_weights<F: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, F, F)> {
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let t = (s - i0 as f64).clamp(0.0, 1.0);
            (i0, i1, F::from_f64(1.0 - t), F::from_f64(t))
        })
        .collect()
}

fn im2col<F: Scalar>(x: &ArrayView3<F>, kh: usize, kw: usize) -> Array2<F> {
    let (c, h, w) = x.dim();
    let (ph, pw) = (kh / 2, kw / 2);
    let mut col = Array2::<F>::zeros((c * kh * kw, h * w));
    for ch in 0..c {
        let plane = x.index_axis(Axis(0), ch);
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (ch * kh + dy) * kw + dx;
                let mut out_row = col.row_mut(row);
                for y in 0..h {
                    let sy = y as isize + dy as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + dx as isize - pw as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out_row[y * w + xx] = plane[[sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im<F: Scalar>(
    dcol: &ArrayView2<F>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> Array3<F> {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut dx = Array3::<F>::zeros((c, h, w));
    for ch in 0..c {
        for dy in 0..kh {
            for dxk in 0..kw {
                let row = (ch * kh + dy) * kw + dxk;
                let src_row = dcol.row(row);
                for y in 0..h {
                    let sy = y as isize + dy as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + dxk as isize - pw as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dx[[ch, sy as usize, sx as usize]] += src_row[y * w + xx];
                    }
                }
            }
        }
    }
    dx
}

fn mat_view<F: Scalar>(v: &Value<F>, rows: usize, cols: usize) -> ArrayView2<'_, F> {
    v.view()
        .into_shape_with_order((rows, cols))
        .expect("parameter tensors are contiguous")
}
