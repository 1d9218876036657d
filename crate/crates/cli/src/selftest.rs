//! Quick in-binary checks of a build: gradients, reference oracles and the
//! coder round trip.

use clap::ValueEnum;
use msnc_core::attention::{
    mhsa, token_aggregated_attention_with, window_mhsa, AttentionParams, Selection, ShiftPolicy, WindowSelection,
};
use msnc_core::entropy::gaussian_likelihood;
use msnc_core::metrics::{db_transform, psnr_from_mse255};
use msnc_core::model::train_forward;
use msnc_core::params::{Binder, Init, ParamSpec, ParamStore};
use msnc_core::rans::{gaussian_table, rans_decode, rans_encode, SCALE_BINS};
use msnc_core::rng::rng_for;
use msnc_core::tensor::{finite_diff_check, finite_diff_check_at};
use msnc_core::transforms::StageConfig;
use msnc_core::{Codec, CodecModel, Graph, Result, Tensor};
use rand::Rng as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Grad,
    Oracle,
    Rans,
    All,
}

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

/// Store for `specs` with every entry drawn at scale `std`.
fn random_store(specs: Vec<ParamSpec>, std: f64, seed: u64) -> Result<ParamStore> {
    let specs: Vec<ParamSpec> = specs
        .into_iter()
        .map(|s| ParamSpec::new(s.name, &s.shape, Init::TruncNormal(std)))
        .collect();
    ParamStore::from_specs(&specs, seed)
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng_for(seed, &[99]);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

pub fn run(suite: Suite) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Grad | Suite::All) {
        out.extend(grad()?);
    }
    if matches!(suite, Suite::Oracle | Suite::All) {
        out.extend(oracle()?);
    }
    if matches!(suite, Suite::Rans | Suite::All) {
        out.extend(rans()?);
    }
    Ok(out)
}

fn grad() -> Result<Vec<Check>> {
    let x = random_tensor(&[4, 6], 1);
    let w = random_tensor(&[6, 6], 2);
    let ops = finite_diff_check(
        |g, xv| {
            let ones = g.constant(Tensor::ones(&[6]));
            let zeros = g.constant(Tensor::zeros(&[6]));
            xv.matmul(g.constant(w.clone()))?
                .layer_norm(ones, zeros, 1e-6)?
                .gelu()?
                .softmax(1)?
                .square()?
                .sum()
        },
        &x,
        1e-5,
        1e-4,
    )?;

    let cfg = StageConfig::micro(2);
    let store = random_store(CodecModel::specs(&cfg), 0.2, 3)?;
    let img = random_tensor(&[16, 16, 2], 4).map(|v| 0.5 + 0.4 * v);
    let coords: Vec<usize> = (0..img.numel()).step_by(37).collect();
    let e2e = finite_diff_check_at(
        |g, xv| {
            let b = Binder::new(g, &store, false);
            let f = train_forward(&b, &cfg, xv, 0.01, &mut rng_for(5, &[0]), &mut ShiftPolicy::Fixed(1, 1))?;
            Ok(f.loss)
        },
        &img,
        &coords,
        1e-5,
        1e-4,
    )?;
    Ok(vec![
        check("grad.composite_ops", ops.passed, format!("max rel err {:.2e}", ops.max_rel_error)),
        check("grad.micro_pipeline", e2e.passed, format!("max rel err {:.2e}", e2e.max_rel_error)),
    ])
}

fn oracle() -> Result<Vec<Check>> {
    let (c, heads, window, grid) = (8, 2, 2, 3);
    let store = random_store(AttentionParams::specs("a", c), 0.4, 6)?;
    let g = Graph::new();
    let b = Binder::new(&g, &store, false);
    let nw = grid * grid;
    let p = AttentionParams::bind(&b, "a", heads, window, nw)?;
    let side = grid * window;
    let x = g.constant(random_tensor(&[side, side, c], 7));
    let all = token_aggregated_attention_with(x, &p, &Selection::Fixed(WindowSelection::all_windows(nw)))?.value();
    let global = mhsa(x.reshape(&[side * side, c])?, &p)?.reshape(&[side, side, c])?.value();
    let own = token_aggregated_attention_with(x, &p, &Selection::Fixed(WindowSelection::own_window(nw)))?.value();
    let windowed = window_mhsa(x, &p)?.value();
    let d_global = all.max_abs_diff(&global);
    let d_window = own.max_abs_diff(&windowed);

    let one = |v: f64| g.constant(Tensor::new(vec![1], vec![v]).expect("one element"));
    let p_mean = gaussian_likelihood(one(0.0), one(0.0), one(1.0))?.value().data()[0];
    let psnr = psnr_from_mse255(1.0);
    Ok(vec![
        check("oracle.all_windows_is_global", d_global < 1e-8, format!("max diff {d_global:.2e}")),
        check("oracle.own_window_is_windowed", d_window < 1e-10, format!("max diff {d_window:.2e}")),
        check("oracle.gaussian_bin_mass", (p_mean - 0.382_924_922_548_026).abs() < 1e-12, format!("{p_mean:.12}")),
        check("oracle.psnr_anchor", (psnr - 48.1308).abs() < 5e-5, format!("{psnr:.6} dB")),
        check("oracle.db_anchor", db_transform(0.9) == 10.0, format!("{}", db_transform(0.9))),
    ])
}

fn rans() -> Result<Vec<Check>> {
    let table = gaussian_table()?;
    let mut r = rng_for(8, &[0]);
    let n = 100_000;
    let contexts: Vec<usize> = (0..n).map(|_| r.random_range(0..SCALE_BINS)).collect();
    let symbols: Vec<i32> = contexts
        .iter()
        .map(|&c| {
            let cdf = &table.cdfs[c];
            r.random_range(cdf.min_symbol()..=cdf.max_symbol()) / 4
        })
        .collect();
    let bytes = rans_encode(&symbols, &contexts, &table)?;
    let round_trip = rans_decode(&bytes, &contexts, &table)? == symbols;

    let codec = Codec::new(CodecModel::new(StageConfig::micro(3), 9)?)?;
    let img = random_tensor(&[20, 24, 3], 10).map(|v| 0.5 + 0.5 * v);
    let a = codec.compress(&img)?;
    let b = codec.compress(&img)?;
    let dec = codec.decompress(&a.bytes)?;
    Ok(vec![
        check("rans.fuzz_round_trip", round_trip, format!("{n} symbols, {} bytes", bytes.len())),
        check("rans.deterministic_file", a.bytes == b.bytes, format!("{} bytes", a.bytes.len())),
        check(
            "rans.decoder_matches_encoder",
            dec.x_hat == a.x_hat && dec.yhat == a.yhat,
            "bitwise reconstruction".into(),
        ),
    ])
}
