#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = vhvae::midi_io::parse_midi(data);
    let _ = vhvae::midi_io::load_piece(data);
});
