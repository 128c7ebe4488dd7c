#![no_main]

use libfuzzer_sys::fuzz_target;
use vhvae::model::ModelConfig;
use vhvae::trainer::TrainConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(doc) = vhvae::config::KeyValueDoc::parse(text) {
            let _ = ModelConfig::default().apply_doc(&doc);
            let _ = TrainConfig::default().apply_doc(&doc);
        }
    }
});
