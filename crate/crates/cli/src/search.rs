//! Random search over gate dimensions: context hidden size, attention
//! hidden size and encoding size, each drawn uniformly from an arithmetic
//! grid. Dot attention resamples until the encoding and context dimensions
//! agree.

use anyhow::Result;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use maes_core::gate::AttentionKind;

use crate::artifacts::{write_json, Provenance};
use crate::config::SearchSettings;
use crate::pipeline::Workspace;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSample {
    pub context_hidden_dim: usize,
    pub attention_dim: usize,
    pub encoding_dim: usize,
    pub attention_kind: AttentionKind,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SearchOutput {
    pub provenance: Provenance,
    pub grid: Vec<usize>,
    pub samples: Vec<SearchSample>,
}

/// Draw `n_samples` gate configurations from the grid.
pub fn random_search(settings: &SearchSettings, n_samples: usize, seed: u64) -> Vec<SearchSample> {
    let grid = settings.grid_values();
    let mut rng = StdRng::seed_from_u64(seed);
    let draw = |rng: &mut StdRng| *grid.choose(rng).expect("grid is non-empty");
    (0..n_samples)
        .map(|_| {
            let context_hidden_dim = draw(&mut rng);
            let attention_dim = draw(&mut rng);
            let mut encoding_dim = draw(&mut rng);
            if settings.attention_kind == AttentionKind::Dot {
                while encoding_dim != context_hidden_dim {
                    encoding_dim = draw(&mut rng);
                }
            }
            SearchSample {
                context_hidden_dim,
                attention_dim,
                encoding_dim,
                attention_kind: settings.attention_kind,
            }
        })
        .collect()
}

/// Sample and persist `search/samples.json`.
pub fn run_search(ws: &Workspace, n_samples: Option<usize>, seed: Option<u64>) -> Result<SearchOutput> {
    ws.write_config_echo()?;
    let settings = &ws.config.search;
    let n = n_samples.unwrap_or(settings.n_samples);
    let seed = seed.unwrap_or(ws.config.seeds[0]);
    let samples = random_search(settings, n, seed);
    let output = SearchOutput {
        provenance: Provenance {
            config_hash: ws.hash.clone(),
            seed,
            delta: -1.0,
        },
        grid: settings.grid_values(),
        samples,
    };
    write_json(&ws.out.join("search").join("samples.json"), &output)?;
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_stay_on_grid_and_are_deterministic() {
        let settings = SearchSettings::default();
        let a = random_search(&settings, 20, 9);
        let b = random_search(&settings, 20, 9);
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        for s in &a {
            assert!(settings.contains(s.context_hidden_dim));
            assert!(settings.contains(s.attention_dim));
            assert!(settings.contains(s.encoding_dim));
        }
    }

    #[test]
    fn dot_kind_matches_encoding_to_context() {
        let settings = SearchSettings {
            attention_kind: AttentionKind::Dot,
            ..SearchSettings::default()
        };
        for s in random_search(&settings, 50, 3) {
            assert_eq!(s.encoding_dim, s.context_hidden_dim);
        }
    }
}
