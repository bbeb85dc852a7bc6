namespace framelet {}
