#![allow(dead_code)]

use std::sync::OnceLock;

use specflow::bench::config::Config;
use specflow::bench::pipeline;
use specflow::runtime::Models;

/// A configuration small enough to train in a few seconds.
pub const TINY_TOML: &str = r#"
seed = 3
exec = "sequential"

[dataset]
episodes = 6
horizon = 16

[main_model]
embed_dim = 4
encoder_hidden = [8]
field_hidden = [24]

[main_train]
epochs = 2

[draft_model]
hidden = [4]

[draft_train]
epochs = 2
max_prefix = 16

[bench]
trials = 2
"#;

pub fn tiny_config() -> Config {
    Config::from_toml_str(TINY_TOML).expect("tiny config parses")
}

pub fn tiny_models() -> &'static Models {
    static MODELS: OnceLock<Models> = OnceLock::new();
    MODELS.get_or_init(|| pipeline::train_all(&tiny_config(), false).expect("training").0.models)
}
