//! Three interactive views of the attention algebra, exported to the browser
//! as JSON-returning functions. The same functions are plain Rust and are
//! tested natively.

use coattn_core::attention::{build_block_circulant, build_circulant, compact_attend, AttentionKind, AttentionParams};
use coattn_core::equicheck::check_synchrony;
use coattn_core::gconv::{FeatureMap, GConvParams};
use coattn_core::group::{act_on_input, matmul, permutation_matrix, permute_vector};
use coattn_core::model::ConvBlock;
use coattn_core::{GroupSpec, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct ElementRow {
    pub element: String,
    /// `attend(P_g x)`
    pub attend_moved: Vec<f64>,
    /// `P_g attend(x)`
    pub moved_attend: Vec<f64>,
    pub deviation: f64,
}

#[derive(Debug, Serialize)]
pub struct EquivarianceView {
    pub kind: String,
    pub group: String,
    pub matrix: Vec<Vec<f64>>,
    pub input: Vec<f64>,
    pub output: Vec<f64>,
    pub rows: Vec<ElementRow>,
    pub max_deviation: f64,
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let n = t.shape()[1];
    t.data().chunks(n).map(<[f64]>::to_vec).collect()
}

fn parse_kind(kind: &str) -> Result<(AttentionKind, GroupSpec)> {
    match kind {
        "circulant" => Ok((AttentionKind::Circulant, GroupSpec::p4())),
        "block-circulant" => Ok((AttentionKind::BlockCirculant, GroupSpec::p4m())),
        "full-p4" => Ok((AttentionKind::Full, GroupSpec::p4())),
        "full-p4m" => Ok((AttentionKind::Full, GroupSpec::p4m())),
        other => Err(coattn_core::Error::InvalidArgument(format!("unknown attention kind '{other}'"))),
    }
}

/// Applies one random attention map to one random vector and to every
/// permuted copy of it, comparing against the permuted output.
pub fn equivariance_view(kind: &str, seed: u64) -> Result<EquivarianceView> {
    let (k, spec) = parse_kind(kind)?;
    let n = spec.group_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AttentionParams::init(k, n, 1.0, &mut rng)?;
    let matrix = params.materialize();
    let x = Tensor::randn(&[n], 1.0, &mut rng);
    let y = compact_attend(&x, &matrix)?;
    let mut rows = Vec::with_capacity(n);
    for g in spec.elements() {
        let attend_moved = compact_attend(&Tensor::from_vec(permute_vector(g, x.data(), &spec)), &matrix)?.into_data();
        let moved_attend = permute_vector(g, y.data(), &spec);
        let deviation = attend_moved.iter().zip(&moved_attend).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        rows.push(ElementRow { element: g.to_string(), attend_moved, moved_attend, deviation });
    }
    Ok(EquivarianceView {
        kind: kind.to_string(),
        group: spec.to_string(),
        max_deviation: rows.iter().map(|r| r.deviation).fold(0.0, f64::max),
        matrix: rows_of(&matrix),
        input: x.into_data(),
        output: y.into_data(),
        rows,
    })
}

#[derive(Debug, Serialize)]
pub struct CommutationView {
    pub matrix: Vec<Vec<f64>>,
    pub elements: Vec<String>,
    /// `max |P_g Ã − Ã P_g|` per element
    pub deviations: Vec<f64>,
}

/// Block-circulant matrix on p4m, optionally with one entry perturbed, and
/// how far it is from commuting with each of the eight permutations.
pub fn commutation_view(seed: u64, perturbation: f64) -> Result<CommutationView> {
    let spec = GroupSpec::p4m();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = build_block_circulant(&Tensor::randn(&[4], 1.0, &mut rng), &Tensor::randn(&[4], 1.0, &mut rng))?;
    m.set(&[0, 5], m.get(&[0, 5]) + perturbation);
    let mut elements = Vec::new();
    let mut deviations = Vec::new();
    for g in spec.elements() {
        let p = permutation_matrix(g, &spec)?;
        elements.push(g.to_string());
        deviations.push(matmul(&p, &m)?.max_abs_diff(&matmul(&m, &p)?));
    }
    Ok(CommutationView { matrix: rows_of(&m), elements, deviations })
}

/// Plain circulant of a user-supplied first column, for the matrix preview.
pub fn circulant_of(c: &[f64]) -> Result<Vec<Vec<f64>>> {
    Ok(rows_of(&build_circulant(&Tensor::from_vec(c.to_vec()))?))
}

#[derive(Debug, Serialize)]
pub struct SynchronyView {
    pub side: usize,
    pub image: Vec<f64>,
    pub rotated: Vec<f64>,
    /// `[stage][orientation]` response planes of channel 0 for the upright image
    pub base: Vec<Vec<Vec<f64>>>,
    /// Same for the rotated image, rotated back spatially
    pub moved: Vec<Vec<Vec<f64>>>,
    pub stages: Vec<String>,
    pub mismatches: f64,
    pub inconclusive: bool,
}

const GLYPH: [&str; 11] = [
    "...........",
    "..#######..",
    "........#..",
    ".......#...",
    "......#....",
    ".....#.....",
    "....####...",
    "....#......",
    "...#.......",
    "...#.......",
    "...........",
];

fn glyph() -> Tensor {
    let side = GLYPH.len();
    let data = GLYPH.iter().flat_map(|row| row.chars().map(|c| if c == '#' { 1.0 } else { 0.0 })).collect();
    Tensor::new(vec![1, 1, side, side], data).expect("square glyph")
}

/// Lifts a glyph and its quarter-turn rotation with a random p4 filter
/// bank and circulant attention, and reports whether each channel's
/// orientation stack moves as one unit, before and after attention.
pub fn synchrony_view(seed: u64, quarter_turns: u8) -> Result<SynchronyView> {
    let spec = GroupSpec::p4();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = 2;
    let block = ConvBlock {
        params: GConvParams::new(Tensor::randn(&[width, 1, 1, 3, 3], 1.0, &mut rng), Tensor::zeros(&[width]))?,
        spec: spec.clone(),
        lifting: true,
        padding: 1,
        attention: Some(
            (0..width)
                .map(|_| AttentionParams::init(AttentionKind::Circulant, 4, 1.0, &mut rng))
                .collect::<Result<_>>()?,
        ),
    };
    let img = glyph();
    let side = img.shape()[2];
    let g = spec.element(usize::from(quarter_turns % 4));
    let rotated = act_on_input(g, &img, &spec)?;
    let (bc, ba, _) = block.forward_parts(&FeatureMap::from_images(&img)?)?;
    let (mc, ma, _) = block.forward_parts(&FeatureMap::from_images(&rotated)?)?;
    let planes = |t: &Tensor| -> Vec<Vec<f64>> {
        let per = side * side;
        (0..4).map(|o| t.data()[o * width * per..o * width * per + per].to_vec()).collect()
    };
    let back = |m: &FeatureMap| act_on_input(spec.inverse(g), m.data(), &spec);
    let report = check_synchrony(&block, &img, &spec)?;
    Ok(SynchronyView {
        side,
        image: img.into_data(),
        rotated: rotated.into_data(),
        base: vec![planes(bc.data()), planes(ba.data())],
        moved: vec![planes(&back(&mc)?), planes(&back(&ma)?)],
        stages: vec!["before attention".into(), "after attention".into()],
        mismatches: report.max_dev,
        inconclusive: report.inconclusive,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// `kind`: `circulant`, `block-circulant`, `full-p4` or `full-p4m`.
#[wasm_bindgen(js_name = equivariance)]
pub fn js_equivariance(kind: &str, seed: u32) -> std::result::Result<String, JsError> {
    to_js(equivariance_view(kind, u64::from(seed)))
}

#[wasm_bindgen(js_name = commutation)]
pub fn js_commutation(seed: u32, perturbation: f64) -> std::result::Result<String, JsError> {
    to_js(commutation_view(u64::from(seed), perturbation))
}

#[wasm_bindgen(js_name = synchrony)]
pub fn js_synchrony(seed: u32, quarter_turns: u8) -> std::result::Result<String, JsError> {
    to_js(synchrony_view(u64::from(seed), quarter_turns))
}
