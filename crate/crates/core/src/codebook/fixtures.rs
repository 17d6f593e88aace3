//! Reference codebooks.
//!
//! NF4 and AF4 are the published baseline tables. The BOF4 tables are
//! reference designs for Gaussian weights, levels sorted ascending.

use crate::dist::NormalizationMode;
use crate::error::{Error, Result};

use super::{Codebook, CodebookSpec, Metric, Provenance};

pub const NF4: [f64; 16] = [
    -1.0,
    -0.6961928009986877,
    -0.5250730514526367,
    -0.39491748809814453,
    -0.28444138169288635,
    -0.18477343022823334,
    -0.09105003625154495,
    0.0,
    0.07958029955625534,
    0.16093020141124725,
    0.24611230194568634,
    0.33791524171829224,
    0.44070982933044434,
    0.5626170039176941,
    0.7229568362236023,
    1.0,
];

/// AF4 for blocks of 64.
pub const AF4_64: [f64; 16] = [
    -1.0,
    -0.69441008,
    -0.51243739,
    -0.3736951,
    -0.25607552,
    -0.14982478,
    -0.04934812,
    0.0,
    0.04273164,
    0.12934483,
    0.21961274,
    0.31675666,
    0.42563882,
    0.55496234,
    0.72424863,
    1.0,
];

pub const BOF4_MAE_64: [f64; 16] = [
    -1.0,
    -0.7026305794715881,
    -0.5272703766822815,
    -0.3946738243103027,
    -0.2832144796848297,
    -0.1835313588380814,
    -0.090308666229248,
    0.0,
    0.0789600014686584,
    0.1598792523145676,
    0.244986355304718,
    0.3372218906879425,
    0.441359281539917,
    0.565777063369751,
    0.7299178242683411,
    1.0,
];

pub const BOF4_MSE_64: [f64; 16] = [
    -1.0,
    -0.7535245418548584,
    -0.579203724861145,
    -0.4385998845100403,
    -0.3167679905891418,
    -0.2059924453496933,
    -0.1015387624502182,
    0.0,
    0.0887245312333107,
    0.1793769598007202,
    0.2741499841213226,
    0.3758211433887482,
    0.4884937703609467,
    0.6187058687210083,
    0.7790452241897583,
    1.0,
];

pub const BOF4S_MAE_64: [f64; 16] = [
    -0.8018798232078552,
    -0.6076051592826843,
    -0.468828022480011,
    -0.3559602797031403,
    -0.2576169371604919,
    -0.1677481383085251,
    -0.0827366262674332,
    0.0,
    0.0789434835314751,
    0.1597966849803925,
    0.2448495477437973,
    0.3371480107307434,
    0.4412573873996735,
    0.5656819343566895,
    0.7298068404197693,
    1.0,
];

pub const BOF4S_MSE_64: [f64; 16] = [
    -0.8568463921546936,
    -0.6692874431610107,
    -0.5235266089439392,
    -0.4004882574081421,
    -0.2910638153553009,
    -0.1900092959403992,
    -0.0938529595732689,
    0.0,
    0.0887671709060669,
    0.1794802695512772,
    0.2743096053600311,
    0.3760197460651398,
    0.4886530041694641,
    0.6188603639602661,
    0.7791395783424377,
    1.0,
];

pub const BOF4S_MSE_32: [f64; 16] = [
    -0.8732797503471375,
    -0.6907446384429932,
    -0.5437039136886597,
    -0.4173701703548431,
    -0.3038933575153351,
    -0.1986017823219299,
    -0.0981557220220566,
    0.0,
    0.0925938412547112,
    0.187048003077507,
    0.2855197489261627,
    0.3907126188278198,
    0.506283164024353,
    0.6379748582839966,
    0.7956376671791077,
    1.0,
];

pub const BOF4S_MSE_128: [f64; 16] = [
    -0.83739173412323,
    -0.6462452411651611,
    -0.5028634667396545,
    -0.3836247622966766,
    -0.2783779501914978,
    -0.1815713942050934,
    -0.0896477326750755,
    0.0,
    0.0850915610790253,
    0.1720834821462631,
    0.2632072865962982,
    0.3613293170928955,
    0.4707452654838562,
    0.5988966822624207,
    0.761027991771698,
    1.0,
];

pub const BOF4S_MSE_256: [f64; 16] = [
    -0.8146829009056091,
    -0.6221838593482971,
    -0.4820549190044403,
    -0.3669650852680206,
    -0.2659871876239777,
    -0.1733742356300354,
    -0.0855776593089104,
    0.0,
    0.0815095230937004,
    0.1649149656295776,
    0.2524392008781433,
    0.3470274209976196,
    0.4531534314155579,
    0.578848659992218,
    0.7418596744537354,
    1.0,
];

/// BOF4 (MSE, I = 64) designed by numerical integration.
pub const BOF4_MSE_64_THEORETICAL: [f64; 16] = [
    -1.0,
    -0.7535689203869577,
    -0.5792681492535123,
    -0.4386720084478466,
    -0.3168191039791481,
    -0.2060291109696586,
    -0.1015640796456471,
    0.0,
    0.0887646748673216,
    0.1794535266886747,
    0.274249773841407,
    0.375951029286045,
    0.4885925268369112,
    0.6187715546288008,
    0.7790828367844242,
    1.0,
];

/// BOF4 (MSE, I = 64) designed from samples.
pub const BOF4_MSE_64_EMPIRICAL: [f64; 16] = BOF4_MSE_64;

/// Deviation between the two designs above, in dB.
pub const THEORETICAL_VS_EMPIRICAL_DB: f64 = -56.34;

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: [&str; 6] = ["nf4", "af4", "bof4-mae", "bof4-mse", "bof4s-mae", "bof4s-mse"];

/// Design spec behind a builtin name, for block sizes without a table.
pub fn builtin_spec(name: &str, block_size: usize) -> Result<CodebookSpec> {
    match name {
        "bof4-mae" => Ok(CodebookSpec::bof4(Metric::Mae, block_size)),
        "bof4-mse" => Ok(CodebookSpec::bof4(Metric::Mse, block_size)),
        "bof4s-mae" => Ok(CodebookSpec::bof4s(Metric::Mae, block_size)),
        "bof4s-mse" => Ok(CodebookSpec::bof4s(Metric::Mse, block_size)),
        "nf4" | "af4" => Err(Error::InvalidInput(format!("'{name}' is a fixed table, not a design"))),
        other => Err(Error::InvalidInput(format!(
            "unknown codebook '{other}' (expected one of {})",
            BUILTIN_NAMES.join(", ")
        ))),
    }
}

/// The tabulated codebook for `name` at `block_size`, if there is one.
/// NF4 and AF4 are returned at any block size (AF4 always uses its
/// 64-element table).
pub fn builtin(name: &str, block_size: usize) -> Result<Option<Codebook>> {
    let (levels, spec, method): (&[f64; 16], CodebookSpec, &str) = match (name, block_size) {
        ("nf4", _) => (&NF4, CodebookSpec::bof4(Metric::Mse, block_size), "external-fixture"),
        ("af4", _) => (&AF4_64, CodebookSpec::bof4(Metric::Mae, block_size), "external-fixture"),
        ("bof4-mae", 64) => (&BOF4_MAE_64, CodebookSpec::bof4(Metric::Mae, 64), "table-fixture"),
        ("bof4-mse", 64) => (&BOF4_MSE_64, CodebookSpec::bof4(Metric::Mse, 64), "table-fixture"),
        ("bof4s-mae", 64) => (&BOF4S_MAE_64, CodebookSpec::bof4s(Metric::Mae, 64), "table-fixture"),
        ("bof4s-mse", 32) => (&BOF4S_MSE_32, CodebookSpec::bof4s(Metric::Mse, 32), "table-fixture"),
        ("bof4s-mse", 64) => (&BOF4S_MSE_64, CodebookSpec::bof4s(Metric::Mse, 64), "table-fixture"),
        ("bof4s-mse", 128) => (&BOF4S_MSE_128, CodebookSpec::bof4s(Metric::Mse, 128), "table-fixture"),
        ("bof4s-mse", 256) => (&BOF4S_MSE_256, CodebookSpec::bof4s(Metric::Mse, 256), "table-fixture"),
        _ => {
            builtin_spec(name, block_size)?;
            return Ok(None);
        }
    };
    debug_assert_eq!(spec.mode == NormalizationMode::Signed, name.starts_with("bof4s"));
    Codebook::new(name, levels, spec, Provenance::fixture(method)).map(Some)
}
