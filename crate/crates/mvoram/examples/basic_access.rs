//! Single client reading and writing blocks against an in-process server.
//!
//! Shows the three-operation access pattern, initialization behavior, and
//! the server's consolidated view after a few accesses.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use mvoram::client::{AccessRequest, Client, DirectFacade, OpKind};
use mvoram::server::{Mode, ServerConfig, StateMachine};
use mvoram::TreeGeometry;

fn main() {
    let geom = TreeGeometry::with_default_count(4, 4, 16);
    let server = StateMachine::setup(
        ServerConfig {
            geom,
            mode: Mode::Basic,
            c_max: 10,
            reclaim_after: None,
        },
        &[],
    )
    .expect("valid setup");
    let mut facade = DirectFacade::new(server);
    let mut client = Client::new(0, geom, Mode::Basic, 64, ChaCha12Rng::seed_from_u64(42));

    // A read of a never-written address returns the zero block.
    let out = client
        .access(
            AccessRequest {
                op: OpKind::Read,
                addr: 7,
                data: None,
            },
            &mut facade,
        )
        .expect("access completes");
    println!("read addr 7 before any write -> {:?} ({} ops)", out.value, out.ops_issued);

    let payload = b"sixteen byte blk".to_vec();
    let out = client
        .access(
            AccessRequest {
                op: OpKind::Write,
                addr: 7,
                data: Some(payload.clone()),
            },
            &mut facade,
        )
        .expect("access completes");
    println!("write addr 7 -> seq {} ({} ops)", out.trace.seq, out.ops_issued);

    let out = client
        .access(
            AccessRequest {
                op: OpKind::Read,
                addr: 7,
                data: None,
            },
            &mut facade,
        )
        .expect("access completes");
    assert_eq!(out.value, payload);
    println!(
        "read addr 7 -> {:?}",
        String::from_utf8_lossy(&out.value)
    );

    let view = facade.machine().consolidated_view();
    println!(
        "server view: {} address(es) tracked, {} in the stash",
        view.iter().filter(|(_, e)| !e.ts.is_sentinel()).count(),
        view.stash_population()
    );
}
