//! Composition of Gaussian mechanisms under both accountants, and how many
//! repetitions of a query a global budget affords.

use dpsql::accountant::{max_admissible_queries, BudgetLedger, MechanismEvent};
use dpsql::catalog::{AccountantKind, GlobalBudget};
use dpsql::mechanisms::calibrate_sigma;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sigma = calibrate_sigma(0.5, 1e-7, 1.0)?;
    println!("one query: sigma = {sigma:.4} for (0.5, 1e-7) at sensitivity 1");
    let query = [MechanismEvent::gaussian(sigma, 1.0, "count")];

    for kind in [AccountantKind::Rdp, AccountantKind::Pld] {
        let budget = GlobalBudget::new(4.0, 1e-6, kind);
        let mut ledger = BudgetLedger::new(budget);
        let mut admitted = 0;
        while ledger.check_and_charge(&query)?.is_admitted() {
            admitted += 1;
        }
        println!(
            "{kind:?}: admitted {admitted} (predicted {}), epsilon spent {:.4}, delta consumed {:.3e}",
            max_admissible_queries(&query, &budget),
            ledger.epsilon_spent(),
            ledger.delta_consumed()
        );
    }
    Ok(())
}
