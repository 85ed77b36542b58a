#![no_main]

use std::sync::OnceLock;

use himec::auction::{check_feasibility, BidBook};
use himec::io::{read_solution, write_solution};
use himec::scenario::Scenario;
use himec::sim::generate_bids;
use libfuzzer_sys::fuzz_target;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture() -> &'static (Scenario, BidBook) {
    static FX: OnceLock<(Scenario, BidBook)> = OnceLock::new();
    FX.get_or_init(|| {
        let sc =
            Scenario::parse_valid(include_str!("../../crates/core/scenarios/case1.toml")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bids = generate_bids(&sc.generator, &sc.system, 0, &mut rng, 1);
        let book = BidBook::new(bids, &sc.system).unwrap();
        (sc, book)
    })
}

fuzz_target!(|data: &[u8]| {
    let (sc, book) = fixture();
    let Ok(sol) = read_solution(data, book, &sc.system) else {
        return;
    };
    let _ = check_feasibility(&sol, book, &sc.system);
    let mut out = Vec::new();
    write_solution(&mut out, book, &sol, &sc.system).unwrap();
    assert_eq!(
        read_solution(out.as_slice(), book, &sc.system).unwrap(),
        sol
    );
});
