//! Integration checks of the distributed loop against both contract
//! frontends on small scenarios.

use dercoord::coordinator::{run_admm, AdmmSettings};
use dercoord::harness::{fleet_totals, generate_small_random};
use dercoord::ledger::{verify_chain, LedgerContract, MemoryContract};
use dercoord::model::{
    EnvironmentProfile, GridTariff, HvacParams, ProsumerProfile, RenewableProfile, Scenario,
    ServiceRates, ShiftableSpec, StorageParams, TerminalRule, TimeGrid,
};

fn lone_prosumer_scenario() -> Scenario {
    let slots = 4;
    Scenario {
        time: TimeGrid {
            slots,
            slot_hours: 1.0,
        },
        env: EnvironmentProfile {
            tau_out: vec![24.0; slots],
        },
        prosumers: vec![ProsumerProfile {
            id: 0,
            tariff: GridTariff {
                pi_e: 0.15,
                pi_d: 0.5,
                p_g_max: 6.0,
            },
            hvac: HvacParams {
                r: 2.0,
                c: 1.5,
                gamma: -1.5,
                omega_ac: 0.05,
                tau_ref: 23.0,
                tau_min: 0.0,
                tau_max: 40.0,
                tau_init: 23.0,
                p_ac_max: 3.0,
            },
            shiftable: ShiftableSpec {
                window: vec![1, 2],
                preferred: vec![0.0, 0.6, 0.2, 0.0],
                omega_s: 0.1,
                p_s_max: 1.2,
            },
            renewable: RenewableProfile {
                gen: vec![0.0, 0.5, 0.8, 0.1],
            },
            storage: StorageParams {
                e_cap: 2.0,
                eta_ch: 0.9,
                eta_dis: 0.9,
                alpha_min: 0.1,
                alpha_max: 0.9,
                p_ch_max: 1.0,
                p_dis_max: 1.0,
                beta: 0.01,
                e_init: 0.5,
                terminal_rule: TerminalRule::None,
            },
            rates: ServiceRates {
                pi_fit: vec![0.03; slots],
                pi_dr: vec![0.0; slots],
            },
        }],
        admm: AdmmSettings::default(),
    }
}

#[test]
fn lone_prosumer_converges_immediately() {
    let scenario = lone_prosumer_scenario();
    let mut contract = MemoryContract::from_scenario(&scenario).unwrap();
    let report = run_admm(&scenario, &mut contract).unwrap();
    assert!(report.converged);
    assert_eq!(report.iterations, 1);
    assert_eq!(report.history.len(), 1);
    assert_eq!(report.history[0].r_primal, 0.0);
    assert_eq!(report.history[0].r_dual, 0.0);
    assert_eq!(report.settlement, vec![0.0]);
}

#[test]
fn residual_history_is_bit_reproducible() {
    let scenario = generate_small_random(2024);
    let run = || {
        let mut contract = MemoryContract::from_scenario(&scenario).unwrap();
        run_admm(&scenario, &mut contract).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.history.len(), b.history.len());
    for (ha, hb) in a.history.iter().zip(&b.history) {
        assert_eq!(ha.r_primal.to_bits(), hb.r_primal.to_bits());
        assert_eq!(ha.r_dual.to_bits(), hb.r_dual.to_bits());
    }
    for (sa, sb) in a.schedules.iter().zip(&b.schedules) {
        assert_eq!(sa, sb);
    }
}

#[test]
fn ledger_and_memory_agree_on_a_small_scenario() {
    let scenario = generate_small_random(515);
    let mut memory = MemoryContract::from_scenario(&scenario).unwrap();
    let mem_report = run_admm(&scenario, &mut memory).unwrap();
    let mut ledger = LedgerContract::from_scenario(&scenario).unwrap();
    let led_report = run_admm(&scenario, &mut ledger).unwrap();

    assert_eq!(mem_report.history, led_report.history);
    assert_eq!(mem_report.schedules, led_report.schedules);
    assert!(verify_chain(ledger.blocks()).is_valid());
    // One block per completed round plus the genesis block.
    assert_eq!(ledger.blocks().len(), led_report.iterations + 1);

    let (mem_cost, _, _, _) = fleet_totals(&scenario, &mem_report.schedules).unwrap();
    let (led_cost, _, _, _) = fleet_totals(&scenario, &led_report.schedules).unwrap();
    assert_eq!(mem_cost.to_bits(), led_cost.to_bits());
}

#[test]
fn exhausted_budget_is_reported_not_hidden() {
    let mut scenario = generate_small_random(9001);
    scenario.admm.max_iterations = 2;
    scenario.admm.eps_primal = 1e-12;
    scenario.admm.eps_dual = 1e-12;
    let mut contract = MemoryContract::from_scenario(&scenario).unwrap();
    let report = run_admm(&scenario, &mut contract).unwrap();
    assert!(!report.converged);
    assert_eq!(report.iterations, 2);
    assert_eq!(report.history.len(), 2);
    assert_eq!(report.schedules.len(), scenario.fleet_size());
}

#[test]
fn converged_trades_clear_between_counterparties() {
    let scenario = generate_small_random(808);
    let mut contract = MemoryContract::from_scenario(&scenario).unwrap();
    let report = run_admm(&scenario, &mut contract).unwrap();
    assert!(report.converged);
    let eps = scenario.admm.eps_primal;
    let fleet = scenario.fleet_size();
    for i in 0..fleet {
        for j in 0..fleet {
            if i == j {
                continue;
            }
            for t in 0..scenario.time.slots {
                let gap = report.schedules[i].p_et.get(t, j) + report.schedules[j].p_et.get(t, i);
                // Each proposal sits within eps of the shared antisymmetric
                // auxiliary, so pairwise clearing holds within 2 eps.
                assert!(
                    gap.abs() <= 2.0 * eps + 1e-9,
                    "pair ({i},{j}) slot {t} clears poorly: {gap}"
                );
            }
        }
    }
}
