//! Single-instance causal debiasing.
//!
//! An interference map built from repeated function-word activations and
//! statistical outliers is subtracted with a least-squares optimal strength.

use serde::{Deserialize, Serialize};

use crate::data::TokenInfo;
use crate::error::{Error, Result};
use crate::map::{map_stats, ActivationMap};

const DEFAULT_FUNCTION_WORDS: &str = include_str!("../../resources/function_words.txt");

/// POS tags that mark syntactic function words when repeated.
pub const FUNCTION_TAGS: [&str; 4] = ["DT", "IN", "CC", "TO"];

/// Parses a stoplist resource: one word per line, `#` comments and blanks skipped.
pub fn parse_stoplist(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

pub fn default_function_words() -> Vec<String> {
    parse_stoplist(DEFAULT_FUNCTION_WORDS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SicdParams {
    pub omega_rep: f64,
    pub omega_out: f64,
    pub lambda_max: f64,
    /// Outlier bound `mu + z * sigma`.
    pub z: f64,
    pub sigma_gate: f64,
    pub skew_gate: f64,
    pub function_words: Vec<String>,
}

impl Default for SicdParams {
    fn default() -> Self {
        Self {
            omega_rep: 0.5,
            omega_out: 0.5,
            lambda_max: 1.0,
            z: 2.0,
            sigma_gate: 0.25,
            skew_gate: 1.5,
            function_words: default_function_words(),
        }
    }
}

impl SicdParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(format!("sicd: {m}")));
        if !(self.omega_rep >= 0.0 && self.omega_out >= 0.0) {
            return bad("omega_rep and omega_out must be non-negative".into());
        }
        if !(self.lambda_max > 0.0 && self.lambda_max.is_finite()) {
            return bad(format!(
                "lambda_max must be positive, got {}",
                self.lambda_max
            ));
        }
        for (name, v) in [
            ("z", self.z),
            ("sigma_gate", self.sigma_gate),
            ("skew_gate", self.skew_gate),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        Ok(())
    }
}

/// Whether a token counts as a repeated function token.
pub fn is_function_token(token: &TokenInfo, stoplist: &[String]) -> bool {
    let lower = token.text.to_lowercase();
    stoplist.contains(&lower)
        || (FUNCTION_TAGS.contains(&token.pos_tag.as_str()) && token.repeat_count >= 2)
}

/// Normalized mean of the per-token maps of function tokens.
///
/// `per_token_maps[i]` belongs to `tokens[i]`; tokens without a map are
/// skipped. The result is a zero map of `shape` when nothing is selected.
pub fn interference_rep(
    tokens: &[TokenInfo],
    per_token_maps: &[Option<ActivationMap>],
    shape: (usize, usize),
    stoplist: &[String],
) -> Result<ActivationMap> {
    let (h, w) = shape;
    let mut acc = vec![0.0; h * w];
    let mut count = 0usize;
    let mut missing = 0usize;
    for (i, token) in tokens.iter().enumerate() {
        if !is_function_token(token, stoplist) {
            continue;
        }
        match per_token_maps.get(i).and_then(Option::as_ref) {
            Some(m) => {
                if m.shape() != shape {
                    return Err(Error::ShapeMismatch(format!(
                        "per-token map for token {} is {:?}, expected {:?}",
                        token.index,
                        m.shape(),
                        shape
                    )));
                }
                for (a, v) in acc.iter_mut().zip(m.values()) {
                    *a += v;
                }
                count += 1;
            }
            None => missing += 1,
        }
    }
    if count == 0 {
        if missing > 0 {
            log::warn!(
                "{missing} function tokens lack per-token maps; using outlier-only interference"
            );
        }
        return Ok(ActivationMap::zeros(h, w));
    }
    let n = count as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(ActivationMap::from_valid(h, w, acc).normalized())
}

/// Normalized soft exceedance above `mu + z * sigma`.
pub fn interference_out(map: &ActivationMap, z: f64) -> ActivationMap {
    let s = map_stats(map);
    if s.max == s.min {
        return ActivationMap::zeros(map.height(), map.width());
    }
    let bound = s.mean + z * s.std;
    let values = map.values().iter().map(|v| (v - bound).max(0.0)).collect();
    ActivationMap::from_valid(map.height(), map.width(), values).normalized()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `argmin_{0 <= lambda <= lambda_max} ||M - lambda I||^2` in closed form.
pub fn optimal_lambda(
    map: &ActivationMap,
    interference: &ActivationMap,
    lambda_max: f64,
) -> Result<f64> {
    if !map.same_shape(interference) {
        return Err(Error::ShapeMismatch(format!(
            "map {:?} vs interference {:?}",
            map.shape(),
            interference.shape()
        )));
    }
    let ii = dot(interference.values(), interference.values());
    if ii == 0.0 {
        return Ok(0.0);
    }
    let mi = dot(map.values(), interference.values());
    Ok((mi / ii).clamp(0.0, lambda_max))
}

/// Whether the map looks pathological enough to debias.
pub fn gate_open(map: &ActivationMap, params: &SicdParams) -> bool {
    let s = map_stats(map);
    s.std > params.sigma_gate || s.skewness > params.skew_gate
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SicdLog {
    pub gate_open: bool,
    pub lambda: f64,
}

/// Inputs for the repeated-token interference term.
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenMaps<'a> {
    pub tokens: &'a [TokenInfo],
    pub maps: &'a [Option<ActivationMap>],
}

/// Cleaned map before renormalization. A closed gate returns the input.
pub fn sicd_unnormalized(
    map: &ActivationMap,
    tokens: TokenMaps<'_>,
    params: &SicdParams,
) -> Result<(ActivationMap, SicdLog)> {
    if !gate_open(map, params) {
        return Ok((
            map.clone(),
            SicdLog {
                gate_open: false,
                lambda: 0.0,
            },
        ));
    }
    let rep = interference_rep(
        tokens.tokens,
        tokens.maps,
        map.shape(),
        &params.function_words,
    )?;
    let out = interference_out(map, params.z);
    let combined: Vec<f64> = rep
        .values()
        .iter()
        .zip(out.values())
        .map(|(r, o)| params.omega_rep * r + params.omega_out * o)
        .collect();
    let interference = ActivationMap::from_valid(map.height(), map.width(), combined);
    let lambda = optimal_lambda(map, &interference, params.lambda_max)?;
    let cleaned = map
        .values()
        .iter()
        .zip(interference.values())
        .map(|(m, i)| (m - lambda * i).max(0.0))
        .collect();
    Ok((
        ActivationMap::from_valid(map.height(), map.width(), cleaned),
        SicdLog {
            gate_open: true,
            lambda,
        },
    ))
}

pub fn sicd(
    map: &ActivationMap,
    tokens: TokenMaps<'_>,
    params: &SicdParams,
) -> Result<(ActivationMap, SicdLog)> {
    let (cleaned, log) = sicd_unnormalized(map, tokens, params)?;
    if !log.gate_open {
        return Ok((cleaned, log));
    }
    Ok((cleaned.normalized(), log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::normalize_minmax;
    use proptest::prelude::*;

    fn token(index: usize, text: &str, pos: &str, repeat: u32) -> TokenInfo {
        TokenInfo {
            index,
            text: text.into(),
            pos_tag: pos.into(),
            is_answer: pos == "NN",
            repeat_count: repeat,
            per_token_map: None,
        }
    }

    fn grid_lambda(m: &ActivationMap, i: &ActivationMap, lambda_max: f64) -> f64 {
        let steps = (lambda_max / 1e-4).round() as usize;
        let mut best = (f64::INFINITY, 0.0);
        for s in 0..=steps {
            let l = s as f64 * 1e-4;
            let err: f64 = m
                .values()
                .iter()
                .zip(i.values())
                .map(|(a, b)| (a - l * b).powi(2))
                .sum();
            if err < best.0 {
                best = (err, l);
            }
        }
        best.1
    }

    #[test]
    fn stoplist_resource() {
        let words = default_function_words();
        assert_eq!(words.len(), 14);
        assert_eq!(words[0], "a");
        assert!(words.contains(&"with".to_string()));
        assert_eq!(parse_stoplist("# c\nThe\n\n and \n"), vec!["the", "and"]);
    }

    #[test]
    fn function_token_selection() {
        let words = default_function_words();
        assert!(is_function_token(&token(0, "A", "DT", 1), &words));
        assert!(!is_function_token(&token(0, "sheep", "NN", 3), &words));
        assert!(is_function_token(&token(0, "this", "DT", 2), &words));
        assert!(!is_function_token(&token(0, "this", "DT", 1), &words));
        assert!(!is_function_token(&token(0, "runs", "VBZ", 4), &words));
    }

    #[test]
    fn rep_is_mean_of_function_maps() {
        let words = default_function_words();
        let tokens = vec![
            token(0, "a", "DT", 3),
            token(1, "sheep", "NN", 1),
            token(2, "a", "DT", 3),
            token(3, "a", "DT", 3),
        ];
        let maps = vec![
            Some(ActivationMap::new(1, 3, vec![0.0, 1.0, 0.5]).unwrap()),
            Some(ActivationMap::new(1, 3, vec![1.0, 1.0, 1.0]).unwrap()),
            Some(ActivationMap::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap()),
            Some(ActivationMap::new(1, 3, vec![0.0, 0.0, 0.0]).unwrap()),
        ];
        let rep = interference_rep(&tokens, &maps, (1, 3), &words).unwrap();
        let mean = [0.0, 0.5, 0.5];
        let expected = normalize_minmax(&ActivationMap::new(1, 3, mean.to_vec()).unwrap());
        assert_eq!(rep.values(), expected.values());
    }

    #[test]
    fn rep_fallbacks() {
        let words = default_function_words();
        let nouns = vec![token(0, "sheep", "NN", 1)];
        let m = Some(ActivationMap::filled(2, 2, 1.0));
        assert_eq!(
            interference_rep(&nouns, &[m], (2, 2), &words).unwrap(),
            ActivationMap::zeros(2, 2)
        );
        let fw = vec![token(0, "the", "DT", 2), token(1, "the", "DT", 2)];
        assert_eq!(
            interference_rep(&fw, &[None, None], (2, 2), &words).unwrap(),
            ActivationMap::zeros(2, 2)
        );
        assert_eq!(
            interference_rep(&fw, &[], (2, 2), &words).unwrap(),
            ActivationMap::zeros(2, 2)
        );
        let bad = vec![Some(ActivationMap::zeros(3, 2)), None];
        assert!(matches!(
            interference_rep(&fw, &bad, (2, 2), &words),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn outlier_exceedance() {
        let mut v = vec![0.2; 100];
        v[7] = 0.5;
        let m = ActivationMap::new(10, 10, v).unwrap();
        let s = map_stats(&m);
        let bound = s.mean + 2.0 * s.std;
        let out = interference_out(&m, 2.0);
        assert!(0.5 > bound);
        assert_eq!(out.get(0, 7), 1.0);
        assert_eq!(out.values().iter().filter(|v| **v > 0.0).count(), 1);

        assert!(interference_out(&ActivationMap::filled(3, 3, 0.4), 0.0)
            .values()
            .iter()
            .all(|v| *v == 0.0));
        let m = ActivationMap::new(1, 4, vec![0.0, 0.2, 0.6, 1.0]).unwrap();
        let out = interference_out(&m, 0.0);
        assert_eq!(&out.values()[..2], &[0.0, 0.0]);
        assert!((out.get(0, 2) - 0.15 / 0.55).abs() < 1e-12);
        assert_eq!(out.get(0, 3), 1.0);
    }

    #[test]
    fn outlier_exceedance_by_hand() {
        let m = ActivationMap::new(1, 2, vec![0.1, 0.3]).unwrap();
        let s = map_stats(&m);
        assert!((s.mean - 0.2).abs() < 1e-15 && (s.std - 0.1).abs() < 1e-15);
        let pixel = 0.5f64;
        assert!((pixel - (s.mean + 2.0 * s.std) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn lambda_examples() {
        let i = ActivationMap::new(1, 3, vec![0.2, 0.5, 1.0]).unwrap();
        assert_eq!(optimal_lambda(&i, &i, 1.0).unwrap(), 1.0);
        let m2 = i.scaled(2.0).unwrap();
        assert_eq!(optimal_lambda(&m2, &i, 1.0).unwrap(), 1.0);
        assert_eq!(grid_lambda(&m2, &i, 1.0), 1.0);
        let a = ActivationMap::new(1, 2, vec![1.0, 0.0]).unwrap();
        let b = ActivationMap::new(1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(optimal_lambda(&a, &b, 1.0).unwrap(), 0.0);
        assert_eq!(
            optimal_lambda(&a, &ActivationMap::zeros(1, 2), 1.0).unwrap(),
            0.0
        );
        assert!(optimal_lambda(&a, &ActivationMap::zeros(2, 1), 1.0).is_err());
    }

    #[test]
    fn smooth_map_passes_through() {
        let v: Vec<f64> = (0..64).map(|i| 0.4 + 0.002 * i as f64).collect();
        let m = normalize_minmax(&ActivationMap::new(8, 8, v).unwrap());
        let p = SicdParams {
            sigma_gate: 0.35,
            ..SicdParams::default()
        };
        let s = map_stats(&m);
        assert!(s.std <= p.sigma_gate && s.skewness <= p.skew_gate);
        let (out, log) = sicd(&m, TokenMaps::default(), &p).unwrap();
        assert!(!log.gate_open);
        assert_eq!(out, m);
    }

    #[test]
    fn corner_spike_is_reduced() {
        let mut v = vec![0.1; 64];
        for (i, x) in v.iter_mut().enumerate() {
            *x += 0.01 * (i % 5) as f64;
        }
        v[0] = 1.0;
        let m = normalize_minmax(&ActivationMap::new(8, 8, v).unwrap());
        let p = SicdParams {
            omega_rep: 0.0,
            ..SicdParams::default()
        };
        assert!(gate_open(&m, &p));
        let (out, log) = sicd_unnormalized(&m, TokenMaps::default(), &p).unwrap();
        assert!(log.gate_open);
        let i = interference_out(&m, p.z).scaled(p.omega_out).unwrap();
        let oracle = grid_lambda(&m, &i, p.lambda_max);
        assert!((log.lambda - oracle).abs() <= 1e-4);
        assert!(out.get(0, 0) < m.get(0, 0));
        assert!((out.get(0, 0) - (m.get(0, 0) - oracle * i.get(0, 0)).max(0.0)).abs() < 1e-4);
    }

    #[test]
    fn zero_interference_is_identity() {
        let mut v = vec![0.0; 16];
        v[3] = 1.0;
        v[4] = 1.0;
        v[9] = 1.0;
        v[14] = 1.0;
        let m = ActivationMap::new(4, 4, v).unwrap().normalized();
        // four equal peaks: std 0.433 > gate, but no pixel clears mu + 2 sigma
        let p = SicdParams {
            omega_rep: 0.0,
            ..SicdParams::default()
        };
        assert!(gate_open(&m, &p));
        assert!(interference_out(&m, p.z).values().iter().all(|v| *v == 0.0));
        let (out, log) = sicd(&m, TokenMaps::default(), &p).unwrap();
        assert_eq!(log.lambda, 0.0);
        assert_eq!(out.values(), m.values());
    }

    fn arb_pair() -> impl Strategy<Value = (ActivationMap, ActivationMap)> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            (
                proptest::collection::vec(0.0f64..1.0, h * w),
                proptest::collection::vec(0.0f64..1.0, h * w),
            )
                .prop_map(move |(a, b)| {
                    (
                        ActivationMap::new(h, w, a).unwrap(),
                        ActivationMap::new(h, w, b).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn closed_form_matches_grid((m, i) in arb_pair()) {
            let l = optimal_lambda(&m, &i, 1.0).unwrap();
            prop_assert!((l - grid_lambda(&m, &i, 1.0)).abs() <= 1e-4);
            if l > 0.0 && l < 1.0 {
                let r: f64 = m.values().iter().zip(i.values()).map(|(a, b)| (a - l * b) * b).sum();
                prop_assert!(r.abs() < 1e-9);
            }
        }

        #[test]
        fn cleaned_never_exceeds_input((m, rep) in arb_pair(), z in 0.0f64..3.0) {
            let m = normalize_minmax(&m);
            let tokens = vec![token(0, "the", "DT", 2)];
            let maps = vec![Some(rep)];
            let p = SicdParams { z, sigma_gate: 0.0, ..SicdParams::default() };
            let (out, _) = sicd_unnormalized(&m, TokenMaps { tokens: &tokens, maps: &maps }, &p).unwrap();
            for (o, v) in out.values().iter().zip(m.values()) {
                prop_assert!(o <= v);
            }
        }
    }
}
