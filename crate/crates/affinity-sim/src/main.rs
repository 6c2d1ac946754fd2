fn main() {
    std::process::exit(affinity_sim::cli::run());
}
