//! Numeric kernels: forward and backward passes for every primitive the model
//! is built from. Backward functions return exact analytic gradients; the test
//! suite checks each against central finite differences.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// C = alpha * op(A) * op(B) + beta * C, where op is optional transposition.
/// Shapes are validated against the effective (post-transpose) dimensions.
pub fn gemm_into<E: Element>(
    alpha: f64,
    a: &Tensor<E>,
    trans_a: bool,
    b: &Tensor<E>,
    trans_b: bool,
    beta: f64,
    c: &mut Tensor<E>,
) -> Result<()> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != kb {
        return Err(Error::shape(format!(
            "matmul inner dimensions {k} vs {kb} (a {:?}{}, b {:?}{})",
            a.shape(),
            if trans_a { "^T" } else { "" },
            b.shape(),
            if trans_b { "^T" } else { "" },
        )));
    }
    let (cr, cc) = c.dims2()?;
    if (cr, cc) != (m, n) {
        return Err(Error::shape(format!("matmul output {:?}, expected [{m}, {n}]", c.shape())));
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    if k == 0 {
        // gemm with empty inner axis leaves beta*C
        let be = E::from_f64(beta);
        for x in c.data_mut() {
            *x = *x * be;
        }
        return Ok(());
    }
    let (rsa, csa) = if trans_a { (1isize, ac as isize) } else { (ac as isize, 1isize) };
    let (rsb, csb) = if trans_b { (1isize, bc as isize) } else { (bc as isize, 1isize) };
    unsafe {
        E::gemm(
            m,
            k,
            n,
            E::from_f64(alpha),
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            E::from_f64(beta),
            c.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(())
}

/// C = A * B for row-major matrices.
pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, _) = a.dims2()?;
    let (_, n) = b.dims2()?;
    let mut c = Tensor::zeros(&[m, n]);
    gemm_into(1.0, a, false, b, false, 0.0, &mut c)?;
    Ok(c)
}

/// Gradients of C = A*B: dA = dC * B^T, dB = A^T * dC.
pub fn matmul_backward<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    dc: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (m, k) = a.dims2()?;
    let (_, n) = b.dims2()?;
    let mut da = Tensor::zeros(&[m, k]);
    gemm_into(1.0, dc, false, b, true, 0.0, &mut da)?;
    let mut db = Tensor::zeros(&[k, n]);
    gemm_into(1.0, a, true, dc, false, 0.0, &mut db)?;
    Ok((da, db))
}

/// y = x + bias broadcast over rows.
pub fn bias_add<E: Element>(x: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
    let (_, n) = x.dims2()?;
    if bias.shape() != [n] {
        return Err(Error::shape(format!(
            "bias shape {:?} does not match row width {n}",
            bias.shape()
        )));
    }
    let mut y = x.clone();
    let b = bias.data();
    let (rows, cols) = y.dims2()?;
    for r in 0..rows {
        let row = y.row_mut(r);
        for c in 0..cols {
            row[c] = row[c] + b[c];
        }
    }
    Ok(y)
}

/// Gradient of the bias in y = x + bias (dx is dy itself, not recomputed).
pub fn bias_backward<E: Element>(dy: &Tensor<E>) -> Result<Tensor<E>> {
    let (rows, cols) = dy.dims2()?;
    let mut db = Tensor::zeros(&[cols]);
    for r in 0..rows {
        let row = dy.row(r);
        let d = db.data_mut();
        for c in 0..cols {
            d[c] = d[c] + row[c];
        }
    }
    Ok(db)
}

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044_715;

/// Gaussian error linear unit, tanh form:
/// 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3))).
pub fn gelu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let s = E::from_f64(GELU_SCALE);
    let c = E::from_f64(GELU_CUBIC);
    let half = E::from_f64(0.5);
    let one = E::one();
    let mut y = x.clone();
    for v in y.data_mut() {
        let x = *v;
        let u = s * (x + c * x * x * x);
        *v = half * x * (one + u.tanh());
    }
    y
}

/// dx for the tanh-form GELU.
pub fn gelu_backward<E: Element>(x: &Tensor<E>, dy: &Tensor<E>) -> Result<Tensor<E>> {
    if x.shape() != dy.shape() {
        return Err(Error::shape(format!(
            "gelu backward shapes {:?} vs {:?}",
            x.shape(),
            dy.shape()
        )));
    }
    let s = E::from_f64(GELU_SCALE);
    let c3 = E::from_f64(3.0 * GELU_CUBIC);
    let c = E::from_f64(GELU_CUBIC);
    let half = E::from_f64(0.5);
    let one = E::one();
    let mut dx = x.clone();
    for (v, g) in dx.data_mut().iter_mut().zip(dy.data()) {
        let x = *v;
        let u = s * (x + c * x * x * x);
        let t = u.tanh();
        let sech2 = one - t * t;
        let du = s * (one + c3 * x * x);
        let grad = half * (one + t) + half * x * sech2 * du;
        *v = grad * *g;
    }
    Ok(dx)
}

/// Row-wise softmax with max subtraction. Fails on zero-width rows.
pub fn softmax<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (rows, cols) = x.dims2()?;
    if cols == 0 {
        return Err(Error::shape("softmax over an empty axis"));
    }
    let mut y = x.clone();
    for r in 0..rows {
        let row = y.row_mut(r);
        let mut max = row[0];
        for v in row.iter() {
            if *v > max {
                max = *v;
            }
        }
        let mut sum = E::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(y)
}

/// dx given softmax output y: dx_i = y_i * (dy_i - sum_j dy_j y_j) per row.
pub fn softmax_backward<E: Element>(y: &Tensor<E>, dy: &Tensor<E>) -> Result<Tensor<E>> {
    if y.shape() != dy.shape() {
        return Err(Error::shape(format!(
            "softmax backward shapes {:?} vs {:?}",
            y.shape(),
            dy.shape()
        )));
    }
    let (rows, cols) = y.dims2()?;
    let mut dx = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        let yr = y.row(r);
        let gr = dy.row(r);
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        let out = dx.row_mut(r);
        for c in 0..cols {
            out[c] = E::from_f64(yr[c].as_f64() * (gr[c].as_f64() - dot));
        }
    }
    Ok(dx)
}

/// Per-row cross-entropy of softmax(logits) against integer labels.
pub struct XentOutput<E: Element> {
    /// Natural-log loss per row.
    pub losses: Vec<f64>,
    /// Softmax probabilities, cached for the backward pass.
    pub probs: Tensor<E>,
}

pub fn softmax_xent<E: Element>(logits: &Tensor<E>, labels: &[u32]) -> Result<XentOutput<E>> {
    let (rows, cols) = logits.dims2()?;
    if cols == 0 {
        return Err(Error::shape("softmax over an empty axis"));
    }
    if labels.len() != rows {
        return Err(Error::shape(format!("{} labels for {rows} logit rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= cols) {
        return Err(Error::parameter(format!("label {bad} out of vocabulary width {cols}")));
    }
    let mut probs = logits.clone();
    let mut losses = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = probs.row_mut(r);
        let mut max = row[0];
        for v in row.iter() {
            if *v > max {
                max = *v;
            }
        }
        let mut denom = 0.0f64;
        for v in row.iter_mut() {
            *v = *v - max;
            denom += v.as_f64().exp();
        }
        let z_label = row[labels[r] as usize].as_f64();
        losses.push(denom.ln() - z_label);
        let inv = 1.0 / denom;
        for v in row.iter_mut() {
            *v = E::from_f64(v.as_f64().exp() * inv);
        }
    }
    Ok(XentOutput { losses, probs })
}

/// dlogits given cached probabilities, labels, and upstream per-row dloss.
pub fn softmax_xent_backward<E: Element>(
    probs: &Tensor<E>,
    labels: &[u32],
    dloss: &[f64],
) -> Result<Tensor<E>> {
    let (rows, cols) = probs.dims2()?;
    if labels.len() != rows || dloss.len() != rows {
        return Err(Error::shape(format!(
            "{} labels / {} dloss for {rows} prob rows",
            labels.len(),
            dloss.len()
        )));
    }
    let mut dx = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        let pr = probs.row(r);
        let g = dloss[r];
        let label = labels[r] as usize;
        let out = dx.row_mut(r);
        for c in 0..cols {
            let indicator = if c == label { 1.0 } else { 0.0 };
            out[c] = E::from_f64(g * (pr[c].as_f64() - indicator));
        }
    }
    Ok(dx)
}

/// Per-row statistics cached by the layer-norm forward pass.
pub struct LayerNormCache<E: Element> {
    /// Population standard deviation per row (before the epsilon offset).
    pub std: Vec<f64>,
    /// Normalized activations (x - mean) / (std + eps).
    pub xhat: Tensor<E>,
}

/// Row-wise layer normalization y = gain * (x - mean) / (std + eps) + bias.
/// The epsilon sits outside the square root, added to the standard deviation.
pub fn layer_norm<E: Element>(
    x: &Tensor<E>,
    gain: &Tensor<E>,
    bias: &Tensor<E>,
    eps: f64,
) -> Result<(Tensor<E>, LayerNormCache<E>)> {
    let (rows, cols) = x.dims2()?;
    if cols == 0 {
        return Err(Error::shape("layer norm over an empty axis"));
    }
    if gain.shape() != [cols] || bias.shape() != [cols] {
        return Err(Error::shape(format!(
            "layer norm gain {:?} / bias {:?} for width {cols}",
            gain.shape(),
            bias.shape()
        )));
    }
    if !(eps >= 0.0) {
        return Err(Error::parameter(format!("layer norm eps must be >= 0, got {eps}")));
    }
    let mut xhat = Tensor::zeros(&[rows, cols]);
    let mut y = Tensor::zeros(&[rows, cols]);
    let mut stds = Vec::with_capacity(rows);
    let g = gain.data();
    let b = bias.data();
    let n = cols as f64;
    for r in 0..rows {
        let xr = x.row(r);
        let mean = xr.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = xr.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        let denom = std + eps;
        if denom == 0.0 {
            return Err(Error::NonFinite(format!(
                "layer norm row {r}: zero variance with zero eps"
            )));
        }
        stds.push(std);
        let xh = xhat.row_mut(r);
        for c in 0..cols {
            xh[c] = E::from_f64((xr[c].as_f64() - mean) / denom);
        }
        let yr = y.row_mut(r);
        let xh = xhat.row(r);
        for c in 0..cols {
            yr[c] = g[c] * xh[c] + b[c];
        }
    }
    Ok((y, LayerNormCache { std: stds, xhat }))
}

/// Gradients of layer norm with respect to input, gain, and bias.
pub fn layer_norm_backward<E: Element>(
    cache: &LayerNormCache<E>,
    gain: &Tensor<E>,
    bias_eps: f64,
    dy: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (rows, cols) = cache.xhat.dims2()?;
    if dy.shape() != [rows, cols] {
        return Err(Error::shape(format!(
            "layer norm backward dy {:?} for cache [{rows}, {cols}]",
            dy.shape()
        )));
    }
    let mut dx = Tensor::zeros(&[rows, cols]);
    let mut dgain = Tensor::zeros(&[cols]);
    let mut dbias = Tensor::zeros(&[cols]);
    let n = cols as f64;
    let g = gain.data();
    for r in 0..rows {
        let xh = cache.xhat.row(r);
        let dyr = dy.row(r);
        let std = cache.std[r];
        let denom = std + bias_eps;
        // gy is the gradient with respect to xhat
        let mut mean_gy = 0.0f64;
        let mut mean_gy_xhat = 0.0f64;
        for c in 0..cols {
            let gy = dyr[c].as_f64() * g[c].as_f64();
            mean_gy += gy;
            mean_gy_xhat += gy * xh[c].as_f64();
        }
        mean_gy /= n;
        mean_gy_xhat /= n;
        let dxr = dx.row_mut(r);
        for c in 0..cols {
            let gy = dyr[c].as_f64() * g[c].as_f64();
            let centered = (gy - mean_gy) / denom;
            // the projection term vanishes along with the variance
            let proj = if std == 0.0 { 0.0 } else { xh[c].as_f64() * mean_gy_xhat / std };
            dxr[c] = E::from_f64(centered - proj);
        }
        let dg = dgain.data_mut();
        for c in 0..cols {
            dg[c] = dg[c] + dyr[c] * xh[c];
        }
        let db = dbias.data_mut();
        for c in 0..cols {
            db[c] = db[c] + dyr[c];
        }
    }
    Ok((dx, dgain, dbias))
}

/// Rows of `table` selected by `ids`.
pub fn embedding_gather<E: Element>(table: &Tensor<E>, ids: &[u32]) -> Result<Tensor<E>> {
    let (vocab, width) = table.dims2()?;
    let mut out = Tensor::zeros(&[ids.len(), width]);
    for (r, &id) in ids.iter().enumerate() {
        if id as usize >= vocab {
            return Err(Error::parameter(format!("embedding id {id} out of table rows {vocab}")));
        }
        out.row_mut(r).copy_from_slice(table.row(id as usize));
    }
    Ok(out)
}

/// Scatter-add of dy rows into the gradient of the embedding table.
pub fn embedding_scatter_add<E: Element>(
    dtable: &mut Tensor<E>,
    ids: &[u32],
    dy: &Tensor<E>,
) -> Result<()> {
    let (vocab, width) = dtable.dims2()?;
    let (rows, dcols) = dy.dims2()?;
    if rows != ids.len() || dcols != width {
        return Err(Error::shape(format!(
            "scatter of {:?} with {} ids into {:?}",
            dy.shape(),
            ids.len(),
            dtable.shape()
        )));
    }
    for (r, &id) in ids.iter().enumerate() {
        if id as usize >= vocab {
            return Err(Error::parameter(format!("embedding id {id} out of table rows {vocab}")));
        }
        let src = dy.row(r);
        let dst = dtable.row_mut(id as usize);
        for c in 0..width {
            dst[c] = dst[c] + src[c];
        }
    }
    Ok(())
}

/// Copy of columns [c0, c1) of a matrix.
pub fn slice_cols<E: Element>(x: &Tensor<E>, c0: usize, c1: usize) -> Result<Tensor<E>> {
    let (rows, cols) = x.dims2()?;
    if c0 > c1 || c1 > cols {
        return Err(Error::shape(format!("column slice {c0}..{c1} of width {cols}")));
    }
    let mut out = Tensor::zeros(&[rows, c1 - c0]);
    for r in 0..rows {
        out.row_mut(r).copy_from_slice(&x.row(r)[c0..c1]);
    }
    Ok(out)
}

/// Add `src` into columns [c0, ...) of `dst`.
pub fn add_into_cols<E: Element>(dst: &mut Tensor<E>, src: &Tensor<E>, c0: usize) -> Result<()> {
    let (rows, cols) = dst.dims2()?;
    let (srows, scols) = src.dims2()?;
    if srows != rows || c0 + scols > cols {
        return Err(Error::shape(format!(
            "paste of {:?} at column {c0} into {:?}",
            src.shape(),
            dst.shape()
        )));
    }
    for r in 0..rows {
        let d = &mut dst.row_mut(r)[c0..c0 + scols];
        let s = src.row(r);
        for c in 0..scols {
            d[c] = d[c] + s[c];
        }
    }
    Ok(())
}
