#![no_main]

use libfuzzer_sys::fuzz_target;
use vigru::data::decode_bytes;

fuzz_target!(|data: &[u8]| {
    let _ = decode_bytes::<f32>(data, 8);
});
