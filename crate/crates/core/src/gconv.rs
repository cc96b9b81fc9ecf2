//! Lifting and group convolutions plus the pointwise and pooling layers
//! that sit between them. Every forward op has a matching `*_backward`.

use crate::error::{shape_err, Error, Result};
use crate::group::{act_on_group_stack, GroupElement, GroupSpec};
use crate::tensor::{ConvGeometry, Tensor};

/// A stack of planes with axes `(batch, group, channel, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Tensor,
    spec: GroupSpec,
}

impl FeatureMap {
    pub fn new(data: Tensor, spec: GroupSpec) -> Result<Self> {
        let s = data.shape();
        if s.len() != 5 {
            return shape_err(format!("feature map must be [B,G,Λ,H,W], got {s:?}"));
        }
        if s[1] != spec.group_size() {
            return shape_err(format!(
                "group axis of length {} does not match {spec} (size {})",
                s[1],
                spec.group_size()
            ));
        }
        Ok(Self { data, spec })
    }

    /// Wraps `[B,C,H,W]` images as a feature map with a trivial group axis.
    pub fn from_images(images: &Tensor) -> Result<Self> {
        let &[b, c, h, w] = images.shape() else {
            return shape_err(format!("images must be [B,C,H,W], got {:?}", images.shape()));
        };
        Self::new(images.clone().reshape(&[b, 1, c, h, w])?, GroupSpec::trans())
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn spec(&self) -> &GroupSpec {
        &self.spec
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn group_size(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[4]
    }
}

/// Codomain action of `g`: planes move by the lattice action and group
/// channel `h` goes to `g·h`.
pub fn act_on_feature(g: GroupElement, fmap: &FeatureMap) -> Result<FeatureMap> {
    FeatureMap::new(act_on_group_stack(g, &fmap.data, &fmap.spec)?, fmap.spec.clone())
}

/// Filters `[Λ_out, Λ_in, G_in, k, k]` and a per-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct GConvParams {
    pub filters: Tensor,
    pub bias: Tensor,
}

impl GConvParams {
    pub fn new(filters: Tensor, bias: Tensor) -> Result<Self> {
        let s = filters.shape();
        if s.len() != 5 {
            return shape_err(format!("filters must be [Λ_out,Λ_in,G_in,k,k], got {s:?}"));
        }
        if s[3] != s[4] || s[3] % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "filters must be square with odd side, got {}x{}",
                s[3], s[4]
            )));
        }
        if bias.shape() != [s[0]] {
            return shape_err(format!("bias has shape {:?}, expected [{}]", bias.shape(), s[0]));
        }
        Ok(Self { filters, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.filters.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.filters.shape()[1]
    }

    pub fn in_group(&self) -> usize {
        self.filters.shape()[2]
    }

    pub fn kernel(&self) -> usize {
        self.filters.shape()[3]
    }
}

/// Transforms a `[k,k]` or `[G_in,k,k]` filter by `g`: the planes get the
/// lattice action and, when a group axis is present, entry `h` moves to `g·h`.
pub fn filter_transform(filter: &Tensor, g: GroupElement, spec: &GroupSpec) -> Result<Tensor> {
    match *filter.shape() {
        [k, k2] => {
            if k != k2 {
                return Err(Error::InvalidArgument(format!("filter must be square, got {k}x{k2}")));
            }
            let data = spec.transform_planes(g, filter.data(), k, k)?;
            Tensor::new(vec![k, k], data)
        }
        [gin, k, k2] => {
            if k != k2 {
                return Err(Error::InvalidArgument(format!("filter must be square, got {k}x{k2}")));
            }
            if gin == 1 {
                let data = spec.transform_planes(g, filter.data(), k, k)?;
                return Tensor::new(vec![1, k, k], data);
            }
            let stacked = filter.clone().reshape(&[1, gin, 1, k, k])?;
            act_on_group_stack(g, &stacked, spec)?.reshape(&[gin, k, k])
        }
        _ => shape_err(format!("filter must be [k,k] or [G,k,k], got {:?}", filter.shape())),
    }
}

/// Every transformed copy of the filters laid out as a plain correlation
/// kernel `[G·Λ_out, G_in·Λ_in, k, k]` with output channel `g·Λ_out + λ`
/// and input channel `h·Λ_in + λ'`.
fn expand_filters(filters: &Tensor, spec: &GroupSpec, lifting: bool) -> Result<Tensor> {
    let &[lo, li, gin, k, _] = filters.shape() else {
        return shape_err("filters must be 5-D");
    };
    let g_out = spec.group_size();
    let plane = k * k;
    let mut bank = vec![0.0; g_out * lo * gin * li * plane];
    let src = filters.data();
    for gi in 0..g_out {
        let g = spec.element(gi);
        let moved = spec.transform_planes(g, src, k, k)?;
        for h in 0..gin {
            // lifting filters have no group axis to permute
            let src_h = if lifting { h } else { spec.mul_index(spec.inverse_index(gi), h) };
            for l in 0..lo {
                for lp in 0..li {
                    let from = ((l * li + lp) * gin + src_h) * plane;
                    let to = ((gi * lo + l) * (gin * li) + h * li + lp) * plane;
                    bank[to..to + plane].copy_from_slice(&moved[from..from + plane]);
                }
            }
        }
    }
    Tensor::new(vec![g_out * lo, gin * li, k, k], bank)
}

/// Adjoint of [`expand_filters`]: sums the gradient of every transformed
/// copy back onto the shared filters.
fn fold_filter_grad(grad_bank: &[f64], shape: &[usize], spec: &GroupSpec, lifting: bool) -> Result<Tensor> {
    let &[lo, li, gin, k, _] = shape else {
        return shape_err("filters must be 5-D");
    };
    let g_out = spec.group_size();
    let plane = k * k;
    let mut out = vec![0.0; lo * li * gin * plane];
    let mut gathered = vec![0.0; lo * li * gin * plane];
    for gi in 0..g_out {
        for h in 0..gin {
            let src_h = if lifting { h } else { spec.mul_index(spec.inverse_index(gi), h) };
            for l in 0..lo {
                for lp in 0..li {
                    let from = ((gi * lo + l) * (gin * li) + h * li + lp) * plane;
                    let to = ((l * li + lp) * gin + src_h) * plane;
                    gathered[to..to + plane].copy_from_slice(&grad_bank[from..from + plane]);
                }
            }
        }
        let back = spec.transform_planes(spec.element(spec.inverse_index(gi)), &gathered, k, k)?;
        out.iter_mut().zip(&back).for_each(|(o, b)| *o += b);
    }
    Tensor::new(shape.to_vec(), out)
}

struct GConvPlan {
    geom: ConvGeometry,
    batch: usize,
    lifting: bool,
}

fn plan(x: &FeatureMap, params: &GConvParams, spec: &GroupSpec, padding: usize, lifting: bool) -> Result<GConvPlan> {
    if lifting {
        if x.group_size() != 1 || params.in_group() != 1 {
            return shape_err(format!(
                "lifting convolution needs a trivial input group axis, got G={} and filter G_in={}",
                x.group_size(),
                params.in_group()
            ));
        }
    } else {
        if x.spec() != spec {
            return shape_err(format!("input lives on {}, layer expects {spec}", x.spec()));
        }
        if params.in_group() != spec.group_size() {
            return shape_err(format!(
                "filter group axis {} does not match {spec} (size {})",
                params.in_group(),
                spec.group_size()
            ));
        }
    }
    if params.in_channels() != x.channels() {
        return shape_err(format!(
            "input has {} channels, filters expect {}",
            x.channels(),
            params.in_channels()
        ));
    }
    let k = params.kernel();
    let geom = ConvGeometry::new(
        x.group_size() * x.channels(),
        x.height(),
        x.width(),
        spec.group_size() * params.out_channels(),
        params.in_group() * params.in_channels(),
        k,
        k,
        padding,
    )?;
    Ok(GConvPlan { geom, batch: x.batch(), lifting })
}

fn gconv_forward(x: &FeatureMap, params: &GConvParams, spec: &GroupSpec, padding: usize, lifting: bool, with_bias: bool) -> Result<FeatureMap> {
    let p = plan(x, params, spec, padding, lifting)?;
    let bank = expand_filters(&params.filters, spec, lifting)?;
    let (gm, lo) = (spec.group_size(), params.out_channels());
    let in_len = p.geom.c_in * p.geom.h * p.geom.w;
    let out_plane = p.geom.oh * p.geom.ow;
    let out_len = p.geom.c_out * out_plane;
    let mut out = vec![0.0; p.batch * out_len];
    for b in 0..p.batch {
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        p.geom.forward(&x.data().data()[b * in_len..(b + 1) * in_len], bank.data(), dst);
        if with_bias {
            for (c, chunk) in dst.chunks_exact_mut(out_plane).enumerate() {
                let bv = params.bias.data()[c % lo];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    let data = Tensor::new(vec![p.batch, gm, lo, p.geom.oh, p.geom.ow], out)?;
    FeatureMap::new(data, spec.clone())
}

/// Gradients `(∂L/∂x, ∂L/∂params)` of a lifting or group convolution.
fn gconv_backward(
    x: &FeatureMap,
    params: &GConvParams,
    spec: &GroupSpec,
    padding: usize,
    lifting: bool,
    grad_out: &Tensor,
) -> Result<(Tensor, GConvParams)> {
    let p = plan(x, params, spec, padding, lifting)?;
    let lo = params.out_channels();
    let expect = [p.batch, spec.group_size(), lo, p.geom.oh, p.geom.ow];
    if grad_out.shape() != expect {
        return shape_err(format!("upstream gradient {:?}, expected {expect:?}", grad_out.shape()));
    }
    let bank = expand_filters(&params.filters, spec, lifting)?;
    let in_len = p.geom.c_in * p.geom.h * p.geom.w;
    let out_plane = p.geom.oh * p.geom.ow;
    let out_len = p.geom.c_out * out_plane;
    let mut gx = vec![0.0; x.data().len()];
    let mut gbank = vec![0.0; bank.len()];
    let mut gbias = vec![0.0; lo];
    for b in 0..p.batch {
        let go = &grad_out.data()[b * out_len..(b + 1) * out_len];
        p.geom.backward_input(go, bank.data(), &mut gx[b * in_len..(b + 1) * in_len]);
        p.geom.backward_filter(go, &x.data().data()[b * in_len..(b + 1) * in_len], &mut gbank);
        for (c, chunk) in go.chunks_exact(out_plane).enumerate() {
            gbias[c % lo] += chunk.iter().sum::<f64>();
        }
    }
    let gf = fold_filter_grad(&gbank, params.filters.shape(), spec, p.lifting)?;
    Ok((
        Tensor::new(x.data().shape().to_vec(), gx)?,
        GConvParams { filters: gf, bias: Tensor::from_vec(gbias) },
    ))
}

/// Lifts an image (trivial group axis) to a feature map on `spec`: slice
/// `g` is the image correlated with the `g`-transformed filters, plus bias.
pub fn lift_conv(image: &FeatureMap, params: &GConvParams, spec: &GroupSpec, padding: usize) -> Result<FeatureMap> {
    gconv_forward(image, params, spec, padding, true, true)
}

pub fn lift_conv_backward(
    image: &FeatureMap,
    params: &GConvParams,
    spec: &GroupSpec,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, GConvParams)> {
    gconv_backward(image, params, spec, padding, true, grad_out)
}

/// Group correlation on the input's own group:
/// `out(u, g, λ) = Σ x(u+u', h, λ') · [g·W_{λ,λ'}](h, u') + bias(λ)`.
pub fn group_conv(fmap: &FeatureMap, params: &GConvParams, padding: usize) -> Result<FeatureMap> {
    let spec = fmap.spec().clone();
    gconv_forward(fmap, params, &spec, padding, false, true)
}

pub fn group_conv_backward(fmap: &FeatureMap, params: &GConvParams, padding: usize, grad_out: &Tensor) -> Result<(Tensor, GConvParams)> {
    let spec = fmap.spec().clone();
    gconv_backward(fmap, params, &spec, padding, false, grad_out)
}

/// Convolution without bias; the model applies bias after attention.
pub(crate) fn correlate(x: &FeatureMap, params: &GConvParams, spec: &GroupSpec, padding: usize, lifting: bool) -> Result<FeatureMap> {
    gconv_forward(x, params, spec, padding, lifting, false)
}

pub(crate) fn correlate_backward(
    x: &FeatureMap,
    params: &GConvParams,
    spec: &GroupSpec,
    padding: usize,
    lifting: bool,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (gx, gp) = gconv_backward(x, params, spec, padding, lifting, grad_out)?;
    Ok((gx, gp.filters))
}

/// Adds `bias[λ]` at every batch, group index and position.
pub fn add_channel_bias(fmap: &FeatureMap, bias: &Tensor) -> Result<FeatureMap> {
    if bias.shape() != [fmap.channels()] {
        return shape_err(format!("bias {:?} for {} channels", bias.shape(), fmap.channels()));
    }
    let plane = fmap.height() * fmap.width();
    let lam = fmap.channels();
    let mut data = fmap.data().clone();
    for (c, chunk) in data.data_mut().chunks_exact_mut(plane).enumerate() {
        let bv = bias.data()[c % lam];
        chunk.iter_mut().for_each(|v| *v += bv);
    }
    FeatureMap::new(data, fmap.spec().clone())
}

pub fn channel_bias_backward(fmap_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let lam = fmap_shape[2];
    let plane = fmap_shape[3] * fmap_shape[4];
    let mut g = vec![0.0; lam];
    for (c, chunk) in grad_out.data().chunks_exact(plane).enumerate() {
        g[c % lam] += chunk.iter().sum::<f64>();
    }
    Tensor::from_vec(g)
}

pub fn relu(fmap: &FeatureMap) -> FeatureMap {
    FeatureMap {
        data: fmap.data.map(|v| v.max(0.0)),
        spec: fmap.spec.clone(),
    }
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

/// Non-overlapping `size × size` spatial max pooling. Sides must divide evenly.
pub fn spatial_max_pool(fmap: &FeatureMap, size: usize) -> Result<FeatureMap> {
    let (out, _) = max_pool_with_argmax(fmap, size)?;
    Ok(out)
}

fn max_pool_with_argmax(fmap: &FeatureMap, size: usize) -> Result<(FeatureMap, Vec<usize>)> {
    let (h, w) = (fmap.height(), fmap.width());
    if size == 0 || h % size != 0 || w % size != 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot pool a {h}x{w} plane with window {size}"
        )));
    }
    let (oh, ow) = (h / size, w / size);
    let planes = fmap.data().len() / (h * w);
    let src = fmap.data().data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = base + (oy * size + dy) * w + ox * size + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                }
                out.push(src[best]);
                arg.push(best);
            }
        }
    }
    let s = fmap.data().shape();
    let data = Tensor::new(vec![s[0], s[1], s[2], oh, ow], out)?;
    Ok((FeatureMap::new(data, fmap.spec().clone())?, arg))
}

pub fn spatial_max_pool_backward(input: &FeatureMap, size: usize, grad_out: &Tensor) -> Result<Tensor> {
    let (_, arg) = max_pool_with_argmax(input, size)?;
    let mut g = Tensor::zeros(input.data().shape());
    for (&i, &go) in arg.iter().zip(grad_out.data()) {
        g.data_mut()[i] += go;
    }
    Ok(g)
}

/// Maximum over the group axis; the result has a trivial group axis.
pub fn orientation_pool(fmap: &FeatureMap) -> Result<FeatureMap> {
    Ok(orientation_pool_with_argmax(fmap)?.0)
}

fn orientation_pool_with_argmax(fmap: &FeatureMap) -> Result<(FeatureMap, Vec<usize>)> {
    let (b, g) = (fmap.batch(), fmap.group_size());
    let block = fmap.channels() * fmap.height() * fmap.width();
    let src = fmap.data().data();
    let mut out = Vec::with_capacity(b * block);
    let mut arg = Vec::with_capacity(b * block);
    for bi in 0..b {
        for e in 0..block {
            let mut best = bi * g * block + e;
            for gi in 1..g {
                let i = (bi * g + gi) * block + e;
                if src[i] > src[best] {
                    best = i;
                }
            }
            out.push(src[best]);
            arg.push(best);
        }
    }
    let s = fmap.data().shape();
    let data = Tensor::new(vec![b, 1, s[2], s[3], s[4]], out)?;
    Ok((FeatureMap::new(data, GroupSpec::trans())?, arg))
}

pub fn orientation_pool_backward(input: &FeatureMap, grad_out: &Tensor) -> Result<Tensor> {
    let (_, arg) = orientation_pool_with_argmax(input)?;
    let mut g = Tensor::zeros(input.data().shape());
    for (&i, &go) in arg.iter().zip(grad_out.data()) {
        g.data_mut()[i] += go;
    }
    Ok(g)
}

/// Mean over group axis and space, giving `[B, Λ]`.
pub fn global_average(fmap: &FeatureMap) -> Tensor {
    let (b, g, lam) = (fmap.batch(), fmap.group_size(), fmap.channels());
    let plane = fmap.height() * fmap.width();
    let norm = (g * plane) as f64;
    let mut out = vec![0.0; b * lam];
    for (c, chunk) in fmap.data().data().chunks_exact(plane).enumerate() {
        let (bi, l) = (c / (g * lam), c % lam);
        out[bi * lam + l] += chunk.iter().sum::<f64>() / norm;
    }
    Tensor::new(vec![b, lam], out).expect("b*lam entries")
}

pub fn global_average_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (g, lam) = (input_shape[1], input_shape[2]);
    let plane = input_shape[3] * input_shape[4];
    let norm = (g * plane) as f64;
    let mut out = Tensor::zeros(input_shape);
    for (c, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        let (bi, l) = (c / (g * lam), c % lam);
        let v = grad_out.data()[bi * lam + l] / norm;
        chunk.iter_mut().for_each(|x| *x = v);
    }
    out
}

/// `y = x · Wᵀ + b` for `x: [B, in]`, `W: [out, in]`.
pub fn dense(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (&[b, n_in], &[n_out, w_in]) = (x.shape(), weights.shape()) else {
        return shape_err(format!("dense needs [B,in] and [out,in], got {:?} and {:?}", x.shape(), weights.shape()));
    };
    if n_in != w_in || bias.shape() != [n_out] {
        return shape_err(format!(
            "dense shape mismatch: input {:?}, weights {:?}, bias {:?}",
            x.shape(),
            weights.shape(),
            bias.shape()
        ));
    }
    let mut out = vec![0.0; b * n_out];
    for bi in 0..b {
        let xr = &x.data()[bi * n_in..(bi + 1) * n_in];
        for o in 0..n_out {
            let wr = &weights.data()[o * n_in..(o + 1) * n_in];
            out[bi * n_out + o] = bias.data()[o] + xr.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    Tensor::new(vec![b, n_out], out)
}

/// Returns `(∂L/∂x, ∂L/∂W, ∂L/∂b)`.
pub fn dense_backward(x: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (&[b, n_in], &[n_out, _]) = (x.shape(), weights.shape()) else {
        return shape_err("dense_backward shape mismatch");
    };
    if grad_out.shape() != [b, n_out] {
        return shape_err(format!("dense upstream {:?}, expected [{b},{n_out}]", grad_out.shape()));
    }
    let mut gx = vec![0.0; b * n_in];
    let mut gw = vec![0.0; n_out * n_in];
    let mut gb = vec![0.0; n_out];
    for bi in 0..b {
        let xr = &x.data()[bi * n_in..(bi + 1) * n_in];
        for o in 0..n_out {
            let go = grad_out.data()[bi * n_out + o];
            gb[o] += go;
            let wr = &weights.data()[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                gx[bi * n_in + i] += go * wr[i];
                gw[o * n_in + i] += go * xr[i];
            }
        }
    }
    Ok((
        Tensor::new(vec![b, n_in], gx)?,
        Tensor::new(vec![n_out, n_in], gw)?,
        Tensor::from_vec(gb),
    ))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::act_on_input;
    use crate::tensor::{conv2d, finite_diff_grad, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_params(lo: usize, li: usize, gin: usize, k: usize, r: &mut ChaCha8Rng) -> GConvParams {
        GConvParams::new(Tensor::randn(&[lo, li, gin, k, k], 1.0, r), Tensor::randn(&[lo], 1.0, r)).unwrap()
    }

    fn random_fmap(b: usize, spec: &GroupSpec, lam: usize, n: usize, r: &mut ChaCha8Rng) -> FeatureMap {
        FeatureMap::new(Tensor::randn(&[b, spec.group_size(), lam, n, n], 1.0, r), spec.clone()).unwrap()
    }

    #[test]
    fn filter_transform_examples() {
        let spec = GroupSpec::p4();
        let mut f = Tensor::zeros(&[3, 3]);
        f.set(&[0, 0], 1.0);
        assert_eq!(filter_transform(&f, GroupElement::IDENTITY, &spec).unwrap(), f);
        let r = filter_transform(&f, GroupElement::rotation(1), &spec).unwrap();
        assert_eq!(r.get(&[2, 0]), 1.0);
        assert_eq!(r.sum(), 1.0);

        let mut r2 = rng(0);
        let f = Tensor::randn(&[3, 3], 1.0, &mut r2);
        let rotated: Vec<_> = (0..4).map(|i| filter_transform(&f, GroupElement::rotation(i), &spec).unwrap()).collect();
        let sorted = |t: &Tensor| {
            let mut v = t.data().to_vec();
            v.sort_by(f64::total_cmp);
            v
        };
        for a in 0..4 {
            assert_eq!(sorted(&rotated[a]), sorted(&f));
            for b in a + 1..4 {
                assert_ne!(rotated[a], rotated[b]);
            }
        }
        assert!(filter_transform(&Tensor::zeros(&[2, 3]), GroupElement::rotation(1), &spec).is_err());
    }

    #[test]
    fn lift_slices_equal_conv_with_transformed_filter() {
        let spec = GroupSpec::p4m();
        let mut r = rng(1);
        let img = FeatureMap::from_images(&Tensor::randn(&[1, 2, 7, 7], 1.0, &mut r)).unwrap();
        let params = random_params(3, 2, 1, 3, &mut r);
        let out = lift_conv(&img, &params, &spec, 1).unwrap();
        let image = img.data().clone().reshape(&[2, 7, 7]).unwrap();
        for g in spec.elements() {
            let mut f = Tensor::zeros(&[3, 2, 3, 3]);
            for l in 0..3 {
                for lp in 0..2 {
                    let plane = Tensor::new(vec![3, 3], params.filters.data()[(l * 2 + lp) * 9..][..9].to_vec()).unwrap();
                    let t = filter_transform(&plane, g, &spec).unwrap();
                    f.data_mut()[(l * 2 + lp) * 9..][..9].copy_from_slice(t.data());
                }
            }
            let want = conv2d(&image, &f, 1).unwrap();
            let gi = spec.index(g);
            for l in 0..3 {
                for p in 0..49 {
                    let got = out.data().data()[(gi * 3 + l) * 49 + p];
                    let w = want.data()[l * 49 + p] + params.bias.data()[l];
                    assert!((got - w).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn lift_constant_image_gives_equal_slices() {
        let spec = GroupSpec::p4();
        let mut r = rng(2);
        let img = FeatureMap::from_images(&Tensor::full(&[1, 1, 6, 6], 0.8)).unwrap();
        let out = lift_conv(&img, &random_params(2, 1, 1, 3, &mut r), &spec, 0).unwrap();
        let block = out.data().len() / 4;
        let d = out.data().data();
        for g in 1..4 {
            for e in 0..block {
                assert!((d[g * block + e] - d[e]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lift_one_by_one_filter_scales_image() {
        let spec = GroupSpec::p4();
        let mut r = rng(3);
        let image = Tensor::randn(&[1, 1, 5, 5], 1.0, &mut r);
        let img = FeatureMap::from_images(&image).unwrap();
        let params = GConvParams::new(Tensor::full(&[1, 1, 1, 1, 1], 2.5), Tensor::zeros(&[1])).unwrap();
        let out = lift_conv(&img, &params, &spec, 0).unwrap();
        for g in 0..4 {
            for p in 0..25 {
                assert_eq!(out.data().data()[g * 25 + p], 2.5 * image.data()[p]);
            }
        }
    }

    #[test]
    fn group_conv_hand_example() {
        let spec = GroupSpec::p4();
        let x = FeatureMap::new(Tensor::new(vec![1, 4, 1, 1, 1], vec![1.0, 0.0, 0.0, 0.0]).unwrap(), spec.clone()).unwrap();
        let w = [0.5, -1.0, 2.0, 3.0];
        let params = GConvParams::new(Tensor::new(vec![1, 1, 4, 1, 1], w.to_vec()).unwrap(), Tensor::zeros(&[1])).unwrap();
        let out = group_conv(&x, &params, 0).unwrap();
        assert_eq!(out.data().data(), &[w[0], w[3], w[2], w[1]]);
    }

    #[test]
    fn zero_filters_give_bias() {
        let spec = GroupSpec::p4();
        let mut r = rng(4);
        let x = random_fmap(2, &spec, 3, 5, &mut r);
        let params = GConvParams::new(Tensor::zeros(&[2, 3, 4, 3, 3]), Tensor::from_vec(vec![0.25, -1.0])).unwrap();
        let out = group_conv(&x, &params, 1).unwrap();
        let plane = 25;
        for (c, chunk) in out.data().data().chunks_exact(plane).enumerate() {
            assert!(chunk.iter().all(|&v| v == [0.25, -1.0][c % 2]));
        }
    }

    #[test]
    fn lift_and_group_conv_are_equivariant() {
        for spec in [GroupSpec::p4(), GroupSpec::p4m()] {
            let mut r = rng(5);
            let lift = random_params(3, 2, 1, 3, &mut r);
            let gconv = random_params(2, 3, spec.group_size(), 3, &mut r);
            for _ in 0..5 {
                let image = Tensor::randn(&[1, 2, 9, 9], 1.0, &mut r);
                let x = FeatureMap::from_images(&image).unwrap();
                let y = lift_conv(&x, &lift, &spec, 1).unwrap();
                let z = group_conv(&y, &gconv, 1).unwrap();
                for g in spec.elements() {
                    let xg = FeatureMap::from_images(&act_on_input(g, &image, &spec).unwrap()).unwrap();
                    let yg = lift_conv(&xg, &lift, &spec, 1).unwrap();
                    assert!(yg.data().max_abs_diff(act_on_feature(g, &y).unwrap().data()) < 1e-10);
                    let zg = group_conv(&act_on_feature(g, &y).unwrap(), &gconv, 1).unwrap();
                    assert!(zg.data().max_abs_diff(act_on_feature(g, &z).unwrap().data()) < 1e-10);
                }
            }
        }
    }

    #[test]
    fn gconv_gradients_match_finite_differences() {
        let spec = GroupSpec::p4();
        let mut r = rng(6);
        let x = random_fmap(2, &spec, 2, 5, &mut r);
        let params = random_params(2, 2, 4, 3, &mut r);
        let proj = Tensor::randn(&[2, 4, 2, 5, 5], 1.0, &mut r);
        let (gx, gp) = group_conv_backward(&x, &params, 1, &proj).unwrap();
        let loss = |x: &FeatureMap, p: &GConvParams| group_conv(x, p, 1).unwrap().data().dot(&proj);
        let nx = finite_diff_grad(|t| loss(&FeatureMap::new(t.clone(), spec.clone()).unwrap(), &params), x.data(), 1e-3);
        let nf = finite_diff_grad(|t| loss(&x, &GConvParams::new(t.clone(), params.bias.clone()).unwrap()), &params.filters, 1e-3);
        let nb = finite_diff_grad(|t| loss(&x, &GConvParams::new(params.filters.clone(), t.clone()).unwrap()), &params.bias, 1e-3);
        assert!(relative_error(&gx, &nx, 1e-12) < 1e-6);
        assert!(relative_error(&gp.filters, &nf, 1e-12) < 1e-6);
        assert!(relative_error(&gp.bias, &nb, 1e-12) < 1e-6);

        let p4m = GroupSpec::p4m();
        let img = FeatureMap::from_images(&Tensor::randn(&[1, 1, 5, 5], 1.0, &mut r)).unwrap();
        let lp = random_params(2, 1, 1, 3, &mut r);
        let proj = Tensor::randn(&[1, 8, 2, 5, 5], 1.0, &mut r);
        let (_, gp) = lift_conv_backward(&img, &lp, &p4m, 1, &proj).unwrap();
        let nf = finite_diff_grad(
            |t| lift_conv(&img, &GConvParams::new(t.clone(), lp.bias.clone()).unwrap(), &p4m, 1).unwrap().data().dot(&proj),
            &lp.filters,
            1e-3,
        );
        assert!(relative_error(&gp.filters, &nf, 1e-12) < 1e-6);
    }

    #[test]
    fn orientation_pool_examples() {
        let spec = GroupSpec::p4();
        let x = FeatureMap::new(Tensor::new(vec![1, 4, 1, 1, 1], vec![1.0, 5.0, 2.0, 3.0]).unwrap(), spec.clone()).unwrap();
        assert_eq!(orientation_pool(&x).unwrap().data().data(), &[5.0]);
        let c = FeatureMap::new(Tensor::full(&[1, 4, 2, 3, 3], 0.5), spec.clone()).unwrap();
        assert!(orientation_pool(&c).unwrap().data().data().iter().all(|&v| v == 0.5));

        let mut r = rng(7);
        let x = random_fmap(1, &spec, 2, 5, &mut r);
        let pooled = orientation_pool(&x).unwrap();
        for g in spec.elements() {
            let lhs = orientation_pool(&act_on_feature(g, &x).unwrap()).unwrap();
            let rhs = act_on_input(g, pooled.data(), &spec).unwrap();
            assert_eq!(lhs.data(), &rhs);
        }
    }

    #[test]
    fn small_layer_examples() {
        let spec = GroupSpec::trans();
        let x = FeatureMap::new(Tensor::new(vec![1, 1, 1, 1, 2], vec![-1.0, 2.0]).unwrap(), spec.clone()).unwrap();
        assert_eq!(relu(&x).data().data(), &[0.0, 2.0]);
        let p = FeatureMap::new(Tensor::new(vec![1, 1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), spec).unwrap();
        assert_eq!(spatial_max_pool(&p, 2).unwrap().data().data(), &[4.0]);
        assert!(spatial_max_pool(&p, 3).is_err());

        let v = Tensor::new(vec![1, 3], vec![0.5, -2.0, 7.0]).unwrap();
        let mut eye = Tensor::zeros(&[3, 3]);
        (0..3).for_each(|i| eye.set(&[i, i], 1.0));
        assert_eq!(dense(&v, &eye, &Tensor::zeros(&[3])).unwrap(), v);
        assert!(dense(&v, &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn pointwise_layers_commute_with_group_permutations() {
        let spec = GroupSpec::p4m();
        let mut r = rng(8);
        let x = random_fmap(1, &spec, 2, 6, &mut r);
        for g in spec.elements() {
            let gx = act_on_feature(g, &x).unwrap();
            assert_eq!(relu(&gx), act_on_feature(g, &relu(&x)).unwrap());
            assert_eq!(
                spatial_max_pool(&gx, 2).unwrap(),
                act_on_feature(g, &spatial_max_pool(&x, 2).unwrap()).unwrap()
            );
        }
    }

    #[test]
    fn small_layer_gradients() {
        let mut r = rng(9);
        let spec = GroupSpec::p4();
        let x = random_fmap(2, &spec, 2, 4, &mut r);
        let wrap = |t: &Tensor| FeatureMap::new(t.clone(), spec.clone()).unwrap();

        let proj = Tensor::randn(x.data().shape(), 1.0, &mut r);
        let g = relu_backward(x.data(), &proj);
        let n = finite_diff_grad(|t| relu(&wrap(t)).data().dot(&proj), x.data(), 1e-3);
        assert!(relative_error(&g, &n, 1e-12) < 1e-4);

        let proj = Tensor::randn(&[2, 4, 2, 2, 2], 1.0, &mut r);
        let g = spatial_max_pool_backward(&x, 2, &proj).unwrap();
        let n = finite_diff_grad(|t| spatial_max_pool(&wrap(t), 2).unwrap().data().dot(&proj), x.data(), 1e-3);
        assert!(relative_error(&g, &n, 1e-12) < 1e-4);

        let proj = Tensor::randn(&[2, 1, 2, 4, 4], 1.0, &mut r);
        let g = orientation_pool_backward(&x, &proj).unwrap();
        let n = finite_diff_grad(|t| orientation_pool(&wrap(t)).unwrap().data().dot(&proj), x.data(), 1e-3);
        assert!(relative_error(&g, &n, 1e-12) < 1e-4);

        let proj = Tensor::randn(&[2, 2], 1.0, &mut r);
        let g = global_average_backward(x.data().shape(), &proj);
        let n = finite_diff_grad(|t| global_average(&wrap(t)).dot(&proj), x.data(), 1e-3);
        assert!(relative_error(&g, &n, 1e-12) < 1e-6);

        let v = Tensor::randn(&[3, 4], 1.0, &mut r);
        let w = Tensor::randn(&[5, 4], 1.0, &mut r);
        let b = Tensor::randn(&[5], 1.0, &mut r);
        let proj = Tensor::randn(&[3, 5], 1.0, &mut r);
        let (gv, gw, gb) = dense_backward(&v, &w, &proj).unwrap();
        let nv = finite_diff_grad(|t| dense(t, &w, &b).unwrap().dot(&proj), &v, 1e-3);
        let nw = finite_diff_grad(|t| dense(&v, t, &b).unwrap().dot(&proj), &w, 1e-3);
        let nb = finite_diff_grad(|t| dense(&v, &w, t).unwrap().dot(&proj), &b, 1e-3);
        assert!(relative_error(&gv, &nv, 1e-12) < 1e-6);
        assert!(relative_error(&gw, &nw, 1e-12) < 1e-6);
        assert!(relative_error(&gb, &nb, 1e-12) < 1e-6);
    }

    #[test]
    fn shape_errors() {
        let spec = GroupSpec::p4();
        let mut r = rng(10);
        let x = random_fmap(1, &spec, 2, 5, &mut r);
        assert!(group_conv(&x, &random_params(2, 3, 4, 3, &mut r), 1).is_err());
        assert!(group_conv(&x, &random_params(2, 2, 8, 3, &mut r), 1).is_err());
        assert!(lift_conv(&x, &random_params(2, 2, 1, 3, &mut r), &spec, 1).is_err());
        assert!(GConvParams::new(Tensor::zeros(&[1, 1, 1, 2, 2]), Tensor::zeros(&[1])).is_err());
        assert!(FeatureMap::new(Tensor::zeros(&[1, 3, 1, 2, 2]), spec).is_err());
    }
}
