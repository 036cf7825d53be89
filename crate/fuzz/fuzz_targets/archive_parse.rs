#![no_main]

use libfuzzer_sys::fuzz_target;
use vigru::archive::Archive;
use vigru::checkpoint::restore;

fuzz_target!(|data: &[u8]| {
    if let Ok(archive) = Archive::from_bytes(data) {
        let _ = archive.to_bytes();
        let _ = restore::<f32>(&archive, None);
    }
});
