#![no_main]

use libfuzzer_sys::fuzz_target;
use tfgrad::scorer::protocol::ScoreReply;

fuzz_target!(|data: &[u8]| {
    if let Ok(reply) = ScoreReply::decode(data) {
        let bytes = reply.encode();
        assert_eq!(ScoreReply::decode(&bytes).unwrap().encode(), bytes);
    }
});
