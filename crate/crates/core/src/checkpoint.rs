//! Versioned JSON checkpoints.
//!
//! Layout (one JSON object):
//!
//! | field        | content                                              |
//! |--------------|------------------------------------------------------|
//! | `format`     | the string `"infkan-checkpoint"`                     |
//! | `version`    | integer, currently 1                                 |
//! | `config`     | flat configuration text (TOML, one `key = value` per line) |
//! | `epoch`      | number of completed epochs                           |
//! | `best_epoch` | epoch of the stored model when restored from early stopping |
//! | `model`      | layers with coefficients, windows and norm state     |
//! | `optimizer`  | AdamW hyperparameters, step count and moments         |
//! | `rng`        | ChaCha8 seed (hex), stream and word position (decimal string) |
//!
//! Floats are written with shortest round-trip formatting, so a save/load
//! cycle is bit-exact.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamW;
use crate::train::Trainer;

pub const FORMAT: &str = "infkan-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |m: &str| Error::Format {
            row: 0,
            col: 0,
            msg: format!("checkpoint rng: {m}"),
        };
        if self.seed.len() != 64 {
            return Err(bad("seed must be 64 hex digits"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("bad hex"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("bad word position"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: String,
    pub epoch: usize,
    pub best_epoch: Option<usize>,
    pub model: Model,
    pub optimizer: AdamW,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer, config_text: &str, best_epoch: Option<usize>) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config: config_text.to_string(),
            epoch: t.epoch,
            best_epoch,
            model: t.model.clone(),
            optimizer: t.optimizer.clone(),
            rng: RngState::capture(&t.rng),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Format {
            row: e.line(),
            col: e.column(),
            msg: e.to_string(),
        })?;
        if c.format != FORMAT {
            return Err(Error::Format {
                row: 0,
                col: 0,
                msg: format!("not a checkpoint (format `{}`)", c.format),
            });
        }
        if c.version != VERSION {
            return Err(Error::Format {
                row: 0,
                col: 0,
                msg: format!("unsupported checkpoint version {}", c.version),
            });
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisFamily;
    use crate::data::gen_double_moons;
    use crate::model::{KanSpec, Task};
    use crate::train::TrainConfig;
    use rand::{Rng, SeedableRng};

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..17 {
            rng.random::<u64>();
        }
        let mut back = RngState::capture(&rng).restore().unwrap();
        for _ in 0..10 {
            assert_eq!(rng.random::<u64>(), back.random::<u64>());
        }
    }

    #[test]
    fn trainer_round_trip_is_exact() {
        let ds = gen_double_moons(60, 0.1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Model::infinity_kan(
            2,
            &[3, 2],
            Task::Classification { classes: 2 },
            KanSpec::new(BasisFamily::Piecewise(crate::basis::Activation::Prelu), 1.3),
            &mut rng,
        )
        .unwrap();
        let mut cfg = TrainConfig::new(2);
        cfg.batch_size = 16;
        let mut t = Trainer::new(m, cfg.clone()).unwrap();
        t.run_epoch(&ds).unwrap();
        t.run_epoch(&ds).unwrap();
        let ck = Checkpoint::from_trainer(&t, "seed = 0\n", Some(1));
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back.to_json().unwrap(), ck.to_json().unwrap());

        let mut resumed = Trainer::new(back.model, cfg).unwrap();
        resumed.optimizer = back.optimizer;
        resumed.rng = back.rng.restore().unwrap();
        resumed.epoch = back.epoch;
        let a = t.run_epoch(&ds).unwrap();
        let b = resumed.run_epoch(&ds).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn wrong_format_rejected() {
        let e = Checkpoint::from_json("{\"format\":\"x\"}").unwrap_err();
        assert!(matches!(e, Error::Format { .. }));
    }
}
