#![no_main]

use libfuzzer_sys::fuzz_target;
use tfgrad::scorer::protocol::{read_frame, Handshake};

fuzz_target!(|data: &[u8]| {
    let mut cursor = data;
    // a stream of frames, as the client reads them
    while let Ok(Some(frame)) = read_frame(&mut cursor) {
        let _ = Handshake::from_frame(&frame);
    }
});
