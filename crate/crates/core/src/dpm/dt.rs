//! Generalized distance transform for quadratic deformation costs.
//!
//! For a child score map `g` and a parent position `p` the message is
//!
//! ```text
//! m(p) = max_q g(q) + a dx^2 + b dy^2 + c dx + d dy,   (dx, dy) = q - p - anchor
//! ```
//!
//! The cost is separable, so the 2-D maximum is two passes of the 1-D lower
//! envelope algorithm (one along rows, one along columns), linear in the
//! number of cells. Ties resolve to the smallest `y`, then the smallest `x`.

use crate::error::{Error, Result};

use super::model::DeformationParams;
use super::response::ScoreMap;

/// Message from a child to every position of its parent's map.
#[derive(Debug, Clone)]
pub struct DtMessage {
    pub values: ScoreMap,
    /// Maximising child position for every parent position.
    pub argmax: Vec<(usize, usize)>,
}

impl DtMessage {
    pub fn argmax_at(&self, x: usize, y: usize) -> (usize, usize) {
        self.argmax[y * self.values.width + x]
    }
}

/// 1-D transform: `out[i] = max_q v[q] + quad (q - t)^2 + lin (q - t)` with
/// `t = i + offset`. `quad` must be negative.
///
/// Parabolas are kept in the upper envelope; a query exactly on a breakpoint
/// takes the parabola with the smaller `q`.
#[allow(clippy::too_many_arguments)]
fn transform_1d(
    values: &[f64],
    quad: f64,
    lin: f64,
    offset: i64,
    out: &mut [f64],
    arg: &mut [usize],
    hull: &mut Vec<usize>,
    breaks: &mut Vec<f64>,
) {
    let n = values.len();
    debug_assert!(n > 0 && quad < 0.0);
    // key(q) = v[q] + quad q^2 + lin q; parabolas q < r cross at
    // t = (key(r) - key(q)) / (2 quad (r - q)), r dominating beyond it.
    let key = |q: usize| {
        let qf = q as f64;
        values[q] + quad * qf * qf + lin * qf
    };
    let cross = |q: usize, r: usize| (key(r) - key(q)) / (2.0 * quad * (r as f64 - q as f64));

    hull.clear();
    breaks.clear();
    hull.push(0);
    breaks.push(f64::NEG_INFINITY);
    for r in 1..n {
        let mut s = cross(*hull.last().unwrap(), r);
        while hull.len() > 1 && s <= *breaks.last().unwrap() {
            hull.pop();
            breaks.pop();
            s = cross(*hull.last().unwrap(), r);
        }
        hull.push(r);
        breaks.push(s);
    }

    let mut k = 0;
    for (i, (o, a)) in out.iter_mut().zip(arg.iter_mut()).enumerate() {
        let t = (i as i64 + offset) as f64;
        while k + 1 < hull.len() && breaks[k + 1] < t {
            k += 1;
        }
        let q = hull[k];
        let d = q as f64 - t;
        *o = values[q] + quad * d * d + lin * d;
        *a = q;
    }
}

/// Computes the max-message of `child` onto a `parent_dims` map.
pub fn distance_transform_message(
    child: &ScoreMap,
    params: &DeformationParams,
    anchor: (i32, i32),
    parent_dims: (usize, usize),
) -> Result<DtMessage> {
    if !params.is_concave() {
        return Err(Error::Parameter(format!(
            "deformation a = {}, b = {} is not concave",
            params.a, params.b
        )));
    }
    let (pw, ph) = parent_dims;
    let (cw, chh) = (child.width, child.height);
    if cw == 0 || chh == 0 || pw == 0 || ph == 0 {
        return Err(Error::precondition("empty score map"));
    }
    let mut hull = Vec::with_capacity(cw.max(chh));
    let mut breaks = Vec::with_capacity(cw.max(chh));

    // pass 1: along x for every child row -> (pw x chh)
    let mut row_val = vec![0.0; pw * chh];
    let mut row_arg = vec![0usize; pw * chh];
    for qy in 0..chh {
        let src = &child.data[qy * cw..(qy + 1) * cw];
        transform_1d(
            src,
            params.a,
            params.c,
            anchor.0 as i64,
            &mut row_val[qy * pw..(qy + 1) * pw],
            &mut row_arg[qy * pw..(qy + 1) * pw],
            &mut hull,
            &mut breaks,
        );
    }

    // pass 2: along y for every parent column
    let mut values = vec![0.0; pw * ph];
    let mut argmax = vec![(0, 0); pw * ph];
    let mut col = vec![0.0; chh];
    let mut col_out = vec![0.0; ph];
    let mut col_arg = vec![0usize; ph];
    for px in 0..pw {
        for qy in 0..chh {
            col[qy] = row_val[qy * pw + px];
        }
        transform_1d(
            &col,
            params.b,
            params.d,
            anchor.1 as i64,
            &mut col_out,
            &mut col_arg,
            &mut hull,
            &mut breaks,
        );
        for py in 0..ph {
            let qy = col_arg[py];
            values[py * pw + px] = col_out[py];
            argmax[py * pw + px] = (row_arg[qy * pw + px], qy);
        }
    }
    Ok(DtMessage {
        values: ScoreMap::new(pw, ph, values),
        argmax,
    })
}
