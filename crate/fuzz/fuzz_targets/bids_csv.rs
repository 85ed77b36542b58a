#![no_main]

use std::sync::OnceLock;

use himec::auction::BidBook;
use himec::io::{read_bids, write_bids};
use himec::scenario::Scenario;
use libfuzzer_sys::fuzz_target;

fn scenario() -> &'static Scenario {
    static SC: OnceLock<Scenario> = OnceLock::new();
    SC.get_or_init(|| {
        Scenario::parse_valid(include_str!("../../crates/core/scenarios/case1.toml")).unwrap()
    })
}

fuzz_target!(|data: &[u8]| {
    let system = &scenario().system;
    let Ok(bids) = read_bids(data, system) else {
        return;
    };
    let mut out = Vec::new();
    write_bids(&mut out, &bids, system).unwrap();
    assert_eq!(read_bids(out.as_slice(), system).unwrap(), bids);
    let _ = BidBook::new(bids, system);
});
